"""Location-prior training and evaluation for geo-aware classification and
regression.

A classifier is ``softmax(NN(PE(x)))`` trained with cross-entropy; at
inference its log-probabilities are added to the image model's.  A
regressor computes ``Enc(x) = NN(PE(x))``, optionally gates it elementwise
with a linear projection of an image embedding, and feeds the result to a
two-layer head (width ``d``) that outputs a scalar.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import nn
from ..encoders import EncoderSpec, RbfAnchors, RffParams, build_aux, encode
from ..errors import DegenerateDatasetError, DomainError, EmptyDatasetError, NaNGradError, SchemaError
from .data import DatasetRecord, Prediction, lonlat_of, select_split
from .metrics import classification_report, combine_priors, label_ranks, regression_report


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class NetConfig:
    arch: str = "ffn"
    k: int = 256
    h: int = 2
    d: int = 64
    activation: str = "relu"

    def __post_init__(self):
        if self.arch not in nn.ARCHS:
            raise DomainError(f"unknown arch {self.arch!r}")
        if self.activation not in nn.ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if min(self.k, self.d) < 1 or self.h < 0:
            raise DomainError("k and d must be positive, h non-negative")


@dataclass
class TrainLog:
    epoch_losses: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    steps: int = 0
    warnings: list = field(default_factory=list)


def _sub_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _arch_for(spec: EncoderSpec, net_cfg: NetConfig) -> str:
    # tile indices can only be consumed by an embedding table, and vice versa
    if spec.kind == "tile":
        return "table"
    if net_cfg.arch == "table":
        raise DomainError("the table architecture only pairs with the tile encoder")
    return net_cfg.arch


def _build_net(spec, net_cfg, X_train, out_dim, seed) -> nn.MlpParams:
    arch = _arch_for(spec, net_cfg)
    if arch == "table":
        return nn.init_params("table", 1, net_cfg.k, 0, out_dim, seed, vocab=X_train.reshape(-1))
    return nn.init_params(arch, X_train.shape[1], net_cfg.k, net_cfg.h, out_dim, seed,
                          net_cfg.activation)


def _aux_arrays(aux) -> dict:
    if isinstance(aux, RbfAnchors):
        return {"aux.anchors": aux.anchors}
    if isinstance(aux, RffParams):
        return {"aux.omegas": aux.omegas, "aux.shifts": aux.shifts}
    return {}


def _aux_from_arrays(arrays: dict):
    if "aux.anchors" in arrays:
        return RbfAnchors(arrays.pop("aux.anchors"))
    if "aux.omegas" in arrays:
        return RffParams(arrays.pop("aux.omegas"), arrays.pop("aux.shifts"))
    return None


def _fit(tensors: dict, loss_grad: Callable, full_loss: Callable, n: int,
         config: nn.TrainConfig, log: TrainLog) -> dict:
    """Mini-batch Adam over ``n`` examples; ``loss_grad(tensors, idx, rng)``
    returns the batch loss and gradient dict."""
    shuffle_rng = _sub_rng(config.seed, 1)
    dropout_rng = _sub_rng(config.seed, 2)
    state = nn.AdamState(tensors)
    log.initial_loss = full_loss(tensors)
    t = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            t += 1
            loss, grads = loss_grad(tensors, idx, dropout_rng)
            if not math.isfinite(loss):
                raise NaNGradError(f"non-finite loss at epoch {epoch + 1}, step {t}")
            try:
                tensors = nn.adam_step(tensors, grads, config, t, state)
            except NaNGradError as exc:
                raise NaNGradError(f"{exc} at epoch {epoch + 1}, step {t}") from None
            total += loss * idx.size
        log.epoch_losses.append(total / n)
    log.steps = t
    log.final_loss = full_loss(tensors)
    if log.final_loss > log.initial_loss:
        msg = f"final loss {log.final_loss:.6g} exceeds initial loss {log.initial_loss:.6g}"
        log.warnings.append(f"ConvergenceWarning: {msg}")
        warnings.warn(msg, ConvergenceWarning, stacklevel=3)
    return tensors


# ---------------------------------------------------------------- classification

@dataclass
class LocationClassifier:
    spec: EncoderSpec
    net: nn.MlpParams
    aux: object
    n_classes: int

    def logprobs(self, lonlat) -> np.ndarray:
        """Location prior ``log P(y | x)`` for an ``(n, 2)`` lon/lat array."""
        X = encode(self.spec, lonlat, self.aux)
        return nn.log_softmax(nn.forward_cache(self.net, X)[0])


def _train_split(records):
    train = select_split(records, "train")
    if not train:
        raise EmptyDatasetError("dataset has no train split")
    return train


def train_location_classifier(records, spec: EncoderSpec, net_cfg: NetConfig = None,
                              train_config: nn.TrainConfig = None, n_classes: Optional[int] = None):
    """Fit a location prior on the train split; returns ``(model, TrainLog)``."""
    net_cfg = net_cfg or NetConfig()
    train_config = train_config or nn.TrainConfig()
    train = _train_split(records)
    if any(r.label is None for r in train):
        raise SchemaError("classification training needs labels on every train record")
    y = np.array([r.label for r in train], dtype=np.int64)
    if np.unique(y).size < 2:
        raise DegenerateDatasetError("train split contains a single class")
    C = int(n_classes if n_classes is not None else max(r.label for r in records if r.label is not None) + 1)
    lonlat = lonlat_of(train)
    aux = build_aux(spec, lonlat)
    X = encode(spec, lonlat, aux)
    net = _build_net(spec, net_cfg, X, C, train_config.seed)
    p = train_config.dropout_p

    def loss_grad(tensors, idx, rng):
        params = net.replace(tensors)
        out, cache = nn.forward_cache(params, X[idx], train=True, dropout_p=p, rng=rng)
        loss, g = nn.loss_softmax_ce(out, y[idx])
        grads, _ = nn.backprop(params, X[idx], g, cache)
        return loss, grads

    def full_loss(tensors):
        out, _ = nn.forward_cache(net.replace(tensors), X)
        return nn.loss_softmax_ce(out, y)[0]

    log = TrainLog()
    tensors = _fit(dict(net.tensors), loss_grad, full_loss, len(train), train_config, log)
    return LocationClassifier(spec, net.replace(tensors), aux, C), log


def evaluate_classifier(model: LocationClassifier, records, image_logprobs=None):
    """Location-only, image-only and combined metrics over ``records``.

    ``image_logprobs`` is an ``(n, C)`` array aligned with ``records``.
    Returns ``(report, predictions)``; predictions follow the combined model
    when image outputs are given, the location prior otherwise.
    """
    if not records:
        raise EmptyDatasetError("no records to evaluate")
    y = np.array([r.label for r in records], dtype=np.int64)
    loc_lp = model.logprobs(lonlat_of(records))
    report = {"location_only": classification_report(loc_lp, y)}
    final = loc_lp
    if image_logprobs is not None:
        img = np.asarray(image_logprobs, dtype=np.float64)
        if img.shape != loc_lp.shape:
            raise SchemaError(f"image log-probs have shape {img.shape}, expected {loc_lp.shape}")
        img = img - np.max(img, axis=1, keepdims=True)
        img = nn.log_softmax(img)
        final = combine_priors(img, loc_lp)
        report["image_only"] = classification_report(img, y)
        report["combined"] = classification_report(final, y)
    ranks = label_ranks(final, y)
    preds = [Prediction(r.id, r.lon, r.lat, hit1=int(rank == 1), rank=int(rank))
             for r, rank in zip(records, ranks)]
    return report, preds


# ---------------------------------------------------------------- regression

@dataclass
class LocationRegressor:
    spec: EncoderSpec
    net: nn.MlpParams
    head: dict
    gate: Optional[dict]
    aux: object
    y_mean: float = 0.0
    y_std: float = 1.0

    def tensors(self) -> dict:
        t = {f"enc.{k}": v for k, v in self.net.tensors.items()}
        t.update({f"head.{k}": v for k, v in self.head.items()})
        if self.gate is not None:
            t.update({f"gate.{k}": v for k, v in self.gate.items()})
        return t

    def with_tensors(self, t: dict) -> "LocationRegressor":
        def part(prefix):
            return {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}
        return LocationRegressor(self.spec, self.net.replace(part("enc.")), part("head."),
                                 part("gate.") if self.gate is not None else None,
                                 self.aux, self.y_mean, self.y_std)

    def predict(self, lonlat, image_embedding=None) -> np.ndarray:
        X = encode(self.spec, lonlat, self.aux)
        y, _ = _reg_forward(self, X, image_embedding)
        return y[:, 0] * self.y_std + self.y_mean


def _reg_forward(model: LocationRegressor, X, E=None, train=False, p=0.0, rng=None):
    enc, enc_cache = nn.forward_cache(model.net, X, train=train, dropout_p=p, rng=rng)
    if model.gate is not None:
        if E is None:
            raise SchemaError("this regressor was trained with image embeddings; pass them")
        g = E @ model.gate["W"] + model.gate["b"]
        u = enc * g
    else:
        g = None
        u = enc
    z1 = u @ model.head["W1"] + model.head["b1"]
    a1 = np.maximum(z1, 0.0)
    y = a1 @ model.head["W2"] + model.head["b2"]
    return y, (enc, enc_cache, g, u, z1, a1)


def _reg_backward(model: LocationRegressor, X, E, dy, cache) -> dict:
    enc, enc_cache, g, u, z1, a1 = cache
    grads = {"head.W2": a1.T @ dy, "head.b2": dy.sum(axis=0)}
    dz1 = (dy @ model.head["W2"].T) * (z1 > 0)
    grads["head.W1"] = u.T @ dz1
    grads["head.b1"] = dz1.sum(axis=0)
    du = dz1 @ model.head["W1"].T
    if g is not None:
        dg = du * enc
        grads["gate.W"] = E.T @ dg
        grads["gate.b"] = dg.sum(axis=0)
        du = du * g
    enc_grads, _ = nn.backprop(model.net, X, du, enc_cache)
    grads.update({f"enc.{k}": v for k, v in enc_grads.items()})
    return grads


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def train_location_regressor(records, spec: EncoderSpec, net_cfg: NetConfig = None,
                             train_config: nn.TrainConfig = None):
    """Fit ``head(Enc(x) [* gate(image)])`` with MSE on standardised targets.

    The image gate is used when every train record carries an
    ``image_embedding``.  Returns ``(model, TrainLog)``.
    """
    net_cfg = net_cfg or NetConfig()
    train_config = train_config or nn.TrainConfig()
    train = _train_split(records)
    if any(r.target is None for r in train):
        raise SchemaError("regression training needs targets on every train record")
    t_raw = np.array([r.target for r in train], dtype=np.float64)
    y_mean = float(t_raw.mean())
    y_std = float(t_raw.std()) or 1.0
    y = ((t_raw - y_mean) / y_std)[:, None]
    use_image = all(r.image_embedding is not None for r in train)
    E = np.array([r.image_embedding for r in train], dtype=np.float64) if use_image else None

    lonlat = lonlat_of(train)
    aux = build_aux(spec, lonlat)
    X = encode(spec, lonlat, aux)
    d = net_cfg.d
    net = _build_net(spec, net_cfg, X, d, train_config.seed)
    rng = _sub_rng(train_config.seed, 3)
    head = {"W1": _glorot(rng, d, d), "b1": np.zeros(d), "W2": _glorot(rng, d, 1), "b2": np.zeros(1)}
    gate = None
    if use_image:
        gate = {"W": _glorot(rng, E.shape[1], d), "b": np.ones(d)}
    model = LocationRegressor(spec, net, head, gate, aux, y_mean, y_std)
    p = train_config.dropout_p

    def loss_grad(tensors, idx, drng):
        m = model.with_tensors(tensors)
        Eb = E[idx] if use_image else None
        out, cache = _reg_forward(m, X[idx], Eb, train=True, p=p, rng=drng)
        loss, g = nn.loss_mse(out, y[idx])
        return loss, _reg_backward(m, X[idx], Eb, g, cache)

    def full_loss(tensors):
        out, _ = _reg_forward(model.with_tensors(tensors), X, E)
        return nn.loss_mse(out, y)[0]

    log = TrainLog()
    tensors = _fit(model.tensors(), loss_grad, full_loss, len(train), train_config, log)
    return model.with_tensors(tensors), log


def evaluate_regressor(model: LocationRegressor, records):
    if not records:
        raise EmptyDatasetError("no records to evaluate")
    E = None
    if model.gate is not None:
        E = np.array([r.image_embedding for r in records], dtype=np.float64)
    pred = model.predict(lonlat_of(records), E)
    t = np.array([r.target for r in records], dtype=np.float64)
    key = "fused" if model.gate is not None else "location_only"
    report = {key: regression_report(pred, t)}
    preds = [Prediction(r.id, r.lon, r.lat, abs_err=float(abs(p - tt)))
             for r, p, tt in zip(records, pred, t)]
    return report, preds


# ---------------------------------------------------------------- persistence

def save_model(path, model, extra_sidecar: Optional[dict] = None) -> None:
    """Write a model as a binary checkpoint plus JSON sidecar (encoder spec)."""
    side = {"encoder": model.spec.to_dict()}
    extra = _aux_arrays(model.aux)
    if isinstance(model, LocationClassifier):
        side.update(task="classification", n_classes=model.n_classes)
    else:
        side.update(task="regression", fusion=model.gate is not None)
        extra.update({f"head.{k}": v for k, v in model.head.items()})
        if model.gate is not None:
            extra.update({f"gate.{k}": v for k, v in model.gate.items()})
        extra["target_norm"] = np.array([model.y_mean, model.y_std])
    side.update(extra_sidecar or {})
    nn.save_checkpoint(path, model.net, extra, side)


def load_model(path):
    net, arrays, side = nn.load_checkpoint(path)
    if side is None:
        raise SchemaError(f"{path}: missing JSON sidecar")
    spec = EncoderSpec.from_dict(side["encoder"])
    aux = _aux_from_arrays(arrays)
    if side.get("task") == "classification":
        return LocationClassifier(spec, net, aux, int(side["n_classes"])), side
    head = {k[5:]: arrays[k] for k in list(arrays) if k.startswith("head.")}
    gate = {k[5:]: arrays[k] for k in list(arrays) if k.startswith("gate.")} or None
    y_mean, y_std = arrays["target_norm"]
    return LocationRegressor(spec, net, head, gate, aux, float(y_mean), float(y_std)), side
