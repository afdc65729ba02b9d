"""Command-line front end: ``locenc {synth,train,evaluate,geobias,hotspot}``.

Every command reads an optional JSON run config (``--config``), applies flag
overrides on top, writes the fully resolved config into ``<out>``
and is a pure function of its inputs and ``--seed``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
import zlib

import numpy as np

from . import geobias as gb
from . import nn
from .encoders import EncoderSpec
from .errors import (
    DomainError, JoinError, LocencError, MissingAuxError, NoLowPerfError, ParseError, RangeError,
    SchemaError, ShapeError,
)
from .locbench import data as lbdata
from .locbench import models, synth

log = logging.getLogger("locenc")

USAGE_ERRORS = (DomainError, SchemaError, ParseError, RangeError, JoinError, ShapeError,
                MissingAuxError, FileNotFoundError, IsADirectoryError)

DEFAULT_CONFIG = {
    "task": "classify",
    "seed": 0,
    "encoder": {"kind": "sphereC"},
    "nn": {"arch": "ffn", "k": 256, "h": 2, "d": 64, "activation": "relu", "dropout": 0.5},
    "train": {"lr": 1e-3, "epochs": 30, "batch_size": 128, "beta1": 0.9, "beta2": 0.999,
              "eps": 1e-8, "weight_decay": 0.0},
    "geobias": {"radius_km": None, "k": 4, "n_permutations": 199, "background_spacing_km": None,
                "p_min": 1e-12, "max_centers": None, "low_perf_rule": None},
    "paths": {"dataset": None, "image_logprobs": None, "image_embeddings": None, "output_dir": "out"},
}
_ENCODER_KEYS = {"kind", "S", "r_min", "r_max", "W_dim", "sigma", "delta", "L", "cell_deg", "seed"}
_SECTION_SEEDS = {"encoder": "anchors", "train": "train", "geobias": "permutations"}
_GEOBIAS_TASK_DEFAULTS = {"classify": (100.0, "hit1_miss"), "regress": (1000.0, "abs_err_over_sigma(1)")}


class UsageError(Exception):
    """Bad command line or config; exits with status 2."""


def sub_seed(seed: int, name: str) -> int:
    """Named 32-bit sub-seed derived from the top-level seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------- config

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in update.items():
        allowed = _ENCODER_KEYS if where == "encoder" else set(base)
        if key not in allowed and not (where in _SECTION_SEEDS and key == "seed"):
            raise UsageError(f"unknown config key {where + '.' if where else ''}{key}")
        if isinstance(base.get(key), dict):
            if not isinstance(val, dict):
                raise UsageError(f"config key {key} must be an object")
            out[key] = _merge(base[key], val, key)
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise UsageError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    return cfg


def _set(cfg, section, key, value):
    if value is not None:
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value


def resolve(cfg: dict) -> dict:
    """Fill task-dependent defaults and named sub-seeds."""
    cfg = copy.deepcopy(cfg)
    task = cfg["task"]
    if task not in ("classify", "regress"):
        raise UsageError(f"task must be classify or regress, got {task!r}")
    radius, rule = _GEOBIAS_TASK_DEFAULTS[task]
    g = cfg["geobias"]
    if g["radius_km"] is None:
        g["radius_km"] = radius
    if g["low_perf_rule"] is None:
        g["low_perf_rule"] = rule
    for section, name in _SECTION_SEEDS.items():
        if cfg[section].get("seed") is None:
            cfg[section]["seed"] = sub_seed(cfg["seed"], name)
    try:
        cfg["encoder"] = EncoderSpec.from_dict(cfg["encoder"]).to_dict()
    except TypeError as exc:
        raise UsageError(f"bad encoder config: {exc}") from None
    return cfg


def encoder_spec(cfg) -> EncoderSpec:
    return EncoderSpec.from_dict(cfg["encoder"])


def net_config(cfg) -> models.NetConfig:
    n = cfg["nn"]
    return models.NetConfig(arch=n["arch"], k=int(n["k"]), h=int(n["h"]), d=int(n["d"]),
                            activation=n["activation"])


def train_config(cfg) -> nn.TrainConfig:
    t = dict(cfg["train"])
    return nn.TrainConfig(dropout_p=float(cfg["nn"]["dropout"]), **t)


def geobias_config(cfg) -> gb.GeoBiasConfig:
    g = cfg["geobias"]
    return gb.GeoBiasConfig(radius_km=g["radius_km"], k=int(g["k"]), n_permutations=int(g["n_permutations"]),
                            seed=int(g["seed"]), background_spacing_km=g["background_spacing_km"],
                            p_min=float(g["p_min"]), max_centers=g["max_centers"],
                            low_perf_rule=g["low_perf_rule"])


def _outdir(cfg) -> str:
    out = cfg["paths"]["output_dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _echo_config(cfg, extra=None, command=None) -> None:
    """Persist the resolved config; training and synthesis own ``config.json``,
    later stages write ``config.<command>.json`` so they never clobber it."""
    doc = dict(cfg)
    if extra:
        doc = {**doc, **extra}
    name = "config.json" if command in (None, "train", "synth") else f"config.{command}.json"
    with open(os.path.join(_outdir(cfg), name), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_path(path, what):
    if not path:
        raise UsageError(f"no {what} given")
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    if args.n is None or args.n < 1:
        raise UsageError("--n must be a positive integer")
    params = {}
    for key in ("classes", "kappa", "noise", "clusters", "cluster_radius_km"):
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    task = synth.synth_task(args.kind)
    records = synth.synth_dataset(args.kind, args.n, params, seed=sub_seed(cfg["seed"], "synth"))
    out = _outdir(cfg)
    path = os.path.join(out, "dataset.csv")
    lbdata.save_dataset_csv(path, records, task)
    written = {"dataset": path}
    if args.image_accuracy is not None:
        if task != "classification":
            raise UsageError("--image-accuracy applies to classification kinds only")
        labels = [r.label for r in records]
        n_classes = int(params.get("classes", max(labels) + 1))
        lp = synth.synth_image_logprobs(labels, n_classes, args.image_accuracy,
                                        seed=sub_seed(cfg["seed"], "image"))
        written["image_logprobs"] = os.path.join(out, "image_logprobs.csv")
        lbdata.save_vector_csv(written["image_logprobs"], {r.id: row for r, row in zip(records, lp)}, "logp")
    cfg = dict(cfg, task="classify" if task == "classification" else "regress")
    _echo_config(cfg, {"synth": {"kind": args.kind, "n": args.n, "params": params,
                                 "image_accuracy": args.image_accuracy}})
    print(json.dumps(written))
    return 0


def _load_records(cfg, with_images=True):
    task = lbdata.normalize_task(cfg["task"])
    path = _require_path(cfg["paths"]["dataset"], "dataset")
    records = lbdata.load_dataset_csv(path, task)
    emb = cfg["paths"].get("image_embeddings")
    if with_images and emb and task == "regression":
        lbdata.attach_vectors(records, lbdata.load_vector_csv(_require_path(emb, "image embeddings"), "e"),
                              "image_embedding")
    return task, records


def cmd_train(args, cfg) -> int:
    spec, net_cfg, tcfg = encoder_spec(cfg), net_config(cfg), train_config(cfg)
    task, records = _load_records(cfg)
    out = _outdir(cfg)
    _echo_config(cfg)
    if task == "classification":
        model, tlog = models.train_location_classifier(records, spec, net_cfg, tcfg)
    else:
        model, tlog = models.train_location_regressor(records, spec, net_cfg, tcfg)
    models.save_model(os.path.join(out, "model.ckpt"), model, {"nn": cfg["nn"]})
    with open(os.path.join(out, "train_log.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(tlog.epoch_losses, 1):
            w.writerow([i, repr(float(loss))])
    for msg in tlog.warnings:
        log.warning(msg)
    print(json.dumps({"checkpoint": os.path.join(out, "model.ckpt"), "final_loss": tlog.final_loss}))
    return 0


def cmd_evaluate(args, cfg, encoder_given: bool) -> int:
    out = _outdir(cfg)
    ckpt = _require_path(args.checkpoint or os.path.join(out, "model.ckpt"), "checkpoint")
    model, side = models.load_model(ckpt)
    if side.get("task") != lbdata.normalize_task(cfg["task"]):
        raise UsageError(f"checkpoint was trained for {side.get('task')}, config task is {cfg['task']}")
    if encoder_given and encoder_spec(cfg) != model.spec:
        raise UsageError("encoder settings in the config do not match the checkpoint")
    cfg = dict(cfg, encoder=model.spec.to_dict())
    task, records = _load_records(cfg)
    if args.split != "all":
        records = lbdata.select_split(records, args.split)
    if not records:
        raise UsageError(f"no records in split {args.split!r}")
    if task == "classification":
        img = None
        lp_path = cfg["paths"].get("image_logprobs")
        if lp_path:
            vecs = lbdata.load_vector_csv(_require_path(lp_path, "image log-probabilities"), "logp")
            lbdata.attach_vectors(records, vecs, "image_logprobs")
            img = np.array([r.image_logprobs for r in records])
        if any(r.label is not None and r.label >= model.n_classes for r in records):
            raise UsageError("dataset labels exceed the checkpoint's class count")
        report, preds = models.evaluate_classifier(model, records, img)
    else:
        if model.gate is not None and any(r.image_embedding is None for r in records):
            raise UsageError("checkpoint fuses image embeddings; set paths.image_embeddings")
        report, preds = models.evaluate_regressor(model, records)
    _echo_config(cfg, {"evaluate": {"checkpoint": ckpt, "split": args.split}}, "evaluate")
    _write_json(os.path.join(out, "metrics.json"), _nan_to_none(report))
    lbdata.write_predictions_csv(os.path.join(out, "predictions.csv"), preds)
    print(json.dumps(_nan_to_none(report)))
    return 0


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _read_predictions(args, cfg):
    path = _require_path(args.predictions or os.path.join(cfg["paths"]["output_dir"], "predictions.csv"),
                         "predictions file")
    return lbdata.read_predictions_csv(path)


def cmd_geobias(args, cfg) -> int:
    gcfg = geobias_config(cfg)
    preds = _read_predictions(args, cfg)
    out = _outdir(cfg)
    _echo_config(cfg, command="geobias")
    points = gb.binarize_performance(preds, preds, gcfg.low_perf_rule)
    try:
        report = gb.geo_bias_report(points, gcfg)
        doc = report.to_json_dict()
        doc["no_low_perf"] = False
        gb.write_center_csv(os.path.join(out, "geobias_centers.csv"), report)
    except NoLowPerfError:
        empty = gb.GeoBiasReport(float("nan"), float("nan"), 0, 0, gcfg)
        doc = empty.to_json_dict()
        doc["no_low_perf"] = True
    _write_json(os.path.join(out, "geobias.json"), doc)
    print(json.dumps(doc))
    return 0


def cmd_hotspot(args, cfg) -> int:
    preds = _read_predictions(args, cfg)
    field = args.value
    if field is None:
        field = "hit1" if all(p.hit1 is not None for p in preds) else "abs_err"
    if any(getattr(p, field) is None for p in preds):
        raise UsageError(f"predictions lack {field} values")
    values = np.array([float(getattr(p, field)) for p in preds])
    pts = np.array([[p.lon, p.lat] for p in preds]).reshape(-1, 2)
    k = int(args.k if args.k is not None else cfg["geobias"]["k"])
    if k < 1:
        raise UsageError("--k must be >= 1")
    out = _outdir(cfg)
    _echo_config(cfg, {"hotspot": {"value": field, "k": k}}, "hotspot")
    if len(preds) < 3:
        raise gb.TooFewPointsError(f"hot-spot analysis needs at least 3 predictions, got {len(preds)}")
    res = gb.getis_ord_gi_star(pts, values, gb.knn_weights(pts, k))
    gb.write_hotspot_csv(os.path.join(out, "hotspot.csv"), [p.id for p in preds], pts, res)
    counts = {b: res.bins.count(b) for b in sorted(set(res.bins))}
    print(json.dumps(counts))
    return 0


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="top-level seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = _Parser(prog="locenc", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--kind", required=True, choices=synth.SYNTH_KINDS)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--classes", type=int)
    s.add_argument("--kappa", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--clusters", type=int)
    s.add_argument("--cluster-radius-km", dest="cluster_radius_km", type=float)
    s.add_argument("--image-accuracy", dest="image_accuracy", type=float,
                   help="also write weak synthetic image log-probabilities")

    def data_flags(q):
        q.add_argument("--task", choices=("classify", "regress"))
        q.add_argument("--dataset")
        q.add_argument("--image-logprobs", dest="image_logprobs")
        q.add_argument("--image-embeddings", dest="image_embeddings")

    def encoder_flags(q):
        q.add_argument("--kind", help="position encoder kind")
        q.add_argument("--S", type=int, help="number of scales")
        q.add_argument("--r-min", dest="r_min", type=float)
        q.add_argument("--r-max", dest="r_max", type=float)
        q.add_argument("--cell-deg", dest="cell_deg", type=float)

    t = sub.add_parser("train", parents=[common], help="train a location encoder")
    data_flags(t)
    encoder_flags(t)
    t.add_argument("--arch")
    t.add_argument("--hidden", type=int, help="hidden width")
    t.add_argument("--layers", type=int, help="hidden layer count")
    t.add_argument("--d", type=int, help="embedding width")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    data_flags(e)
    encoder_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test", choices=lbdata.SPLITS + ("all",))

    g = sub.add_parser("geobias", parents=[common], help="geo-bias scores from predictions")
    g.add_argument("--task", choices=("classify", "regress"))
    g.add_argument("--predictions")
    g.add_argument("--radius-km", dest="radius_km", type=float)
    g.add_argument("--k", type=int)
    g.add_argument("--n-permutations", dest="n_permutations", type=int)
    g.add_argument("--max-centers", dest="max_centers", type=int)
    g.add_argument("--rule", help="hit1_miss | abs_err_over_sigma(c) | abs_err_over_percentile(p)")

    h = sub.add_parser("hotspot", parents=[common], help="Getis-Ord Gi* hot spots from predictions")
    h.add_argument("--predictions")
    h.add_argument("--k", type=int)
    h.add_argument("--value", choices=("hit1", "abs_err"))
    return p


def _apply_flags(args, cfg) -> bool:
    """Copy flag overrides into ``cfg``; returns True if encoder settings were given."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    _set(cfg, None, "seed", get("seed"))
    _set(cfg, "paths", "output_dir", get("out"))
    _set(cfg, None, "task", get("task"))
    for key in ("dataset", "image_logprobs", "image_embeddings"):
        _set(cfg, "paths", key, get(key))
    enc_flags = {"kind": "kind", "S": "S", "r_min": "r_min", "r_max": "r_max", "cell_deg": "cell_deg"}
    encoder_given = False
    if args.command in ("train", "evaluate"):
        for flag, key in enc_flags.items():
            if get(flag) is not None:
                cfg["encoder"][key] = get(flag)
                encoder_given = True
    for flag, key in (("arch", "arch"), ("hidden", "k"), ("layers", "h"), ("d", "d")):
        _set(cfg, "nn", key, get(flag))
    for key in ("lr", "epochs", "batch_size"):
        _set(cfg, "train", key, get(key))
    if args.command == "geobias":
        for key in ("radius_km", "k", "n_permutations", "max_centers"):
            _set(cfg, "geobias", key, get(key))
        _set(cfg, "geobias", "low_perf_rule", get("rule"))
    return encoder_given


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(getattr(args, "config", None))
        user_encoder = getattr(args, "config", None) and "encoder" in _read_user_keys(args.config)
        encoder_given = _apply_flags(args, cfg) or bool(user_encoder)
        if args.command == "geobias" and getattr(args, "task", None) is None and "task" not in (
                _read_user_keys(args.config) if getattr(args, "config", None) else {}):
            preds_path = args.predictions or os.path.join(cfg["paths"]["output_dir"], "predictions.csv")
            cfg["task"] = _infer_task(preds_path)
        cfg = resolve(cfg)
        if args.command == "synth":
            return cmd_synth(args, cfg)
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "evaluate":
            return cmd_evaluate(args, cfg, encoder_given)
        if args.command == "geobias":
            return cmd_geobias(args, cfg)
        return cmd_hotspot(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (LocencError, FloatingPointError, ArithmeticError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _read_user_keys(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _infer_task(preds_path) -> str:
    """Classification predictions carry hit1; regression ones abs_err."""
    if not os.path.isfile(preds_path):
        return "classify"
    preds = lbdata.read_predictions_csv(preds_path)
    if preds and all(p.hit1 is None for p in preds):
        return "regress"
    return "classify"


if __name__ == "__main__":
    sys.exit(main())
