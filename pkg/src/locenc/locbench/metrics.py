"""Ranking and regression metrics.

Rankings break score ties toward the lower class index, so a record whose
scores are all equal ranks class 0 first.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from ..errors import ShapeError


def label_ranks(scores, labels) -> np.ndarray:
    """1-based rank of each label within its score row."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != s.shape[0]:
        raise ShapeError(f"{s.shape[0]} score rows but {y.shape[0]} labels")
    own = s[np.arange(s.shape[0]), y][:, None]
    better = np.sum(s > own, axis=1)
    tied_before = np.sum((s == own) & (np.arange(s.shape[1])[None, :] < y[:, None]), axis=1)
    return 1 + better + tied_before


def topk_accuracy(scores, labels, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.mean(label_ranks(scores, labels) <= k))


def mrr(scores, labels) -> float:
    return float(np.mean(1.0 / label_ranks(scores, labels)))


class RegressionMetrics(NamedTuple):
    r2: float
    mae: float
    rmse: float
    degenerate_variance: bool = False


def regression_metrics(preds, targets) -> RegressionMetrics:
    """R^2 about the target mean, MAE and RMSE.

    Constant targets give ``r2 = nan`` with ``degenerate_variance`` set.
    """
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape or p.size == 0:
        raise ShapeError("preds and targets must be equal-length and non-empty")
    e = p - t
    ss_res = float(np.sum(e * e))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    mae = float(np.mean(np.abs(e)))
    rmse = math.sqrt(ss_res / e.size)
    if ss_tot == 0.0:
        return RegressionMetrics(float("nan"), mae, rmse, True)
    return RegressionMetrics(1.0 - ss_res / ss_tot, mae, rmse, False)


def combine_priors(image_logprobs, loc_logprobs) -> np.ndarray:
    """Posterior log-probabilities proportional to image times location prior.

    Works row-wise on ``(..., C)`` arrays.  ``-inf`` entries are allowed; a
    row whose supports do not overlap falls back to the image distribution.
    """
    a = np.asarray(image_logprobs, dtype=np.float64)
    b = np.asarray(loc_logprobs, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image {a.shape} and location {b.shape} log-probs differ in shape")
    if np.any(np.isnan(a)) or np.any(np.isnan(b)) or np.any(a == np.inf) or np.any(b == np.inf):
        raise ShapeError("log-probabilities must be finite or -inf")
    s = a + b
    with np.errstate(invalid="ignore"):
        norm = logsumexp(s, axis=-1, keepdims=True)
        out = s - norm
        img = a - logsumexp(a, axis=-1, keepdims=True)
    dead = ~np.isfinite(norm)
    if np.any(dead):
        out = np.where(dead, img, out)
    return out


def classification_report(scores, labels) -> dict:
    y = np.asarray(labels)
    return {"task": "classification", "n": int(y.size),
            "top1": topk_accuracy(scores, y, 1), "top3": topk_accuracy(scores, y, 3),
            "mrr": mrr(scores, y)}


def regression_report(preds, targets) -> dict:
    m = regression_metrics(preds, targets)
    return {"task": "regression", "n": int(np.size(targets)),
            "r2": None if math.isnan(m.r2) else m.r2, "mae": m.mae, "rmse": m.rmse}
