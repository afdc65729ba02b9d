"""Benchmark harness: datasets, synthetic generators, location-prior
training, prior combination and metrics."""
from .data import (
    DatasetRecord, Prediction, attach_vectors, dataset_columns, load_dataset_csv,
    load_vector_csv, lonlat_of, normalize_task, read_predictions_csv, save_dataset_csv,
    save_vector_csv, select_split, write_predictions_csv,
)
from .metrics import (
    RegressionMetrics, classification_report, combine_priors, label_ranks, mrr,
    regression_metrics, regression_report, topk_accuracy,
)
from .models import (
    ConvergenceWarning, LocationClassifier, LocationRegressor, NetConfig, TrainLog,
    evaluate_classifier, evaluate_regressor, load_model, save_model,
    train_location_classifier, train_location_regressor,
)
from .synth import SYNTH_KINDS, synth_dataset, synth_image_logprobs, synth_task

__all__ = [name for name in dir() if not name.startswith("_")]
