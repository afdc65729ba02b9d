"""Small trainable networks on numpy: the learnable head that maps a position
embedding to a location embedding.

Architectures
-------------
ffn        ``h`` hidden layers with the chosen activation, then a linear output.
residual4  input projection to width ``k``, four residual blocks
           ``y <- y + W2 act(W1 y + b1) + b2``, then a linear output.
siren      sine activations; the first layer scales its pre-activation by 30.
table      embedding-table lookup for integer cell indices (tile encoder).

Weights use the ``x @ W + b`` convention so ``W`` has shape ``(fan_in, fan_out)``.
Everything is float64.  Gradients are plain dicts keyed like ``params.tensors``.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import DomainError, NaNGradError, ShapeError

ARCHS = ("ffn", "residual4", "siren", "table")
ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "sine")
LEAKY_SLOPE = 0.01
SIREN_OMEGA0 = 30.0
N_RES_BLOCKS = 4


@dataclass
class MlpParams:
    arch: str
    in_dim: int
    k: int
    h: int
    d: int
    activation: str
    tensors: dict = field(default_factory=dict)
    vocab: Optional[np.ndarray] = None  # table only: sorted cell ids; OOV row is last

    def replace(self, tensors) -> "MlpParams":
        return dataclasses.replace(self, tensors=dict(tensors))

    def copy(self) -> "MlpParams":
        return self.replace({k: v.copy() for k, v in self.tensors.items()})


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    dropout_p: float = 0.5

    def __post_init__(self):
        if not self.lr > 0:
            raise DomainError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise DomainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DomainError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")


# ---------------------------------------------------------------- activations

def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return np.sin(z)


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.cos(z)


# ---------------------------------------------------------------- init

def init_params(arch: str, in_dim: int, k: int, h: int, d: int, seed: int,
                activation: str = "relu", n_rows: Optional[int] = None,
                vocab=None) -> MlpParams:
    """Seeded initialisation.

    ffn/residual4 weights are Glorot-uniform with zero biases; siren follows
    the sine-network scheme (first layer ``U(-1/in, 1/in)``, later layers
    ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``).  ``table`` needs either
    ``vocab`` (sorted cell ids) or ``n_rows``; one extra zero row is appended
    for unseen cells.
    """
    if arch not in ARCHS:
        raise DomainError(f"unknown arch {arch!r}")
    if arch == "siren":
        activation = "sine"
    if activation not in ACTIVATIONS:
        raise DomainError(f"unknown activation {activation!r}")
    if min(in_dim, k, d) < 1 or h < 0:
        raise DomainError(f"dimensions must be positive (in={in_dim}, k={k}, h={h}, d={d})")
    rng = np.random.default_rng(seed)
    t = {}

    def glorot(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    if arch == "ffn":
        dims = [in_dim] + [k] * h + [d]
        for i in range(h + 1):
            t[f"W{i}"] = glorot(dims[i], dims[i + 1])
            t[f"b{i}"] = np.zeros(dims[i + 1])
    elif arch == "residual4":
        t["Wp"] = glorot(in_dim, k)
        t["bp"] = np.zeros(k)
        for j in range(N_RES_BLOCKS):
            t[f"B{j}.W1"] = glorot(k, k)
            t[f"B{j}.b1"] = np.zeros(k)
            t[f"B{j}.W2"] = glorot(k, k)
            t[f"B{j}.b2"] = np.zeros(k)
        t["Wo"] = glorot(k, d)
        t["bo"] = np.zeros(d)
    elif arch == "siren":
        dims = [in_dim] + [k] * h + [d]
        for i in range(h + 1):
            fan_in = dims[i]
            lim = 1.0 / fan_in if (i == 0 and h > 0) else math.sqrt(6.0 / fan_in)
            t[f"W{i}"] = rng.uniform(-lim, lim, size=(fan_in, dims[i + 1]))
            t[f"b{i}"] = rng.uniform(-1.0, 1.0, size=dims[i + 1]) / math.sqrt(fan_in)
    else:
        if vocab is not None:
            vocab = np.unique(np.asarray(vocab, dtype=np.int64))
            n_rows = vocab.size
        if n_rows is None or n_rows < 1:
            raise DomainError("table arch needs a vocabulary or n_rows >= 1")
        lim = math.sqrt(6.0 / (1 + d))
        table = rng.uniform(-lim, lim, size=(n_rows + 1, d))
        table[-1] = 0.0
        t["table"] = table
        if vocab is None:
            vocab = np.arange(n_rows, dtype=np.int64)
    return MlpParams(arch, int(in_dim), int(k), int(h), int(d), activation, t,
                     vocab if arch == "table" else None)


# ---------------------------------------------------------------- forward / backward

def table_rows(params: MlpParams, cells) -> np.ndarray:
    """Map cell ids to table rows; unseen ids go to the shared zero row."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1)
    vocab = params.vocab
    pos = np.searchsorted(vocab, cells)
    pos_c = np.minimum(pos, vocab.size - 1)
    hit = (pos < vocab.size) & (vocab[pos_c] == cells)
    return np.where(hit, pos_c, vocab.size)


def _as_batch(params, pe):
    x = np.asarray(pe)
    single = x.ndim == 1
    if params.arch == "table":
        x = x.reshape(-1)
        if single and x.size != 1:
            raise ShapeError(f"table input must be a single cell index, got shape {np.shape(pe)}")
        return x, single
    x = x.astype(np.float64, copy=False)
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"expected input width {params.in_dim}, got shape {np.shape(pe)}")
    return x, single


def forward_cache(params: MlpParams, x: np.ndarray, train: bool = False,
                  dropout_p: float = 0.0, rng: Optional[np.random.Generator] = None):
    """Batched forward pass returning ``(output, cache)`` for :func:`backprop`."""
    t, act = params.tensors, params.activation
    if params.arch == "table":
        rows = table_rows(params, x)
        return t["table"][rows], {"rows": rows}
    if params.arch in ("ffn", "siren"):
        cache = {"a": [x], "z": []}
        a = x
        for i in range(params.h):
            z = a @ t[f"W{i}"] + t[f"b{i}"]
            if params.arch == "siren":
                w0 = SIREN_OMEGA0 if i == 0 else 1.0
                a = np.sin(w0 * z)
                z = w0 * z
            else:
                a = _act(act, z)
            cache["z"].append(z)
            cache["a"].append(a)
        out = a @ t[f"W{params.h}"] + t[f"b{params.h}"]
        return out, cache
    # residual4
    zp = x @ t["Wp"] + t["bp"]
    y = _act(act, zp)
    cache = {"x": x, "zp": zp, "yp": y, "blocks": []}
    for j in range(N_RES_BLOCKS):
        u = y @ t[f"B{j}.W1"] + t[f"B{j}.b1"]
        v = _act(act, u)
        mask = None
        if train and dropout_p > 0.0:
            mask = (rng.random(v.shape) >= dropout_p) / (1.0 - dropout_p)
            vd = v * mask
        else:
            vd = v
        cache["blocks"].append((y, u, v, vd, mask))
        y = y + vd @ t[f"B{j}.W2"] + t[f"B{j}.b2"]
    cache["y"] = y
    return y @ t["Wo"] + t["bo"], cache


def forward(params: MlpParams, pe) -> np.ndarray:
    """Inference forward pass for one embedding (1-D) or a batch (2-D)."""
    x, single = _as_batch(params, pe)
    out, _ = forward_cache(params, x)
    return out[0] if single else out


def backprop(params: MlpParams, pe, grad_out, cache=None):
    """Reverse-mode gradients of ``sum(grad_out * forward(params, pe))``.

    Returns ``(grads, grad_input)``; ``grad_input`` is ``None`` for tables.
    Pass the ``cache`` from :func:`forward_cache` to reuse a training pass
    (including its dropout masks).
    """
    x, single = _as_batch(params, pe)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (x.shape[0], params.d):
        raise ShapeError(f"upstream gradient shape {np.shape(grad_out)} does not match output")
    if cache is None:
        _, cache = forward_cache(params, x)
    t, act = params.tensors, params.activation
    grads = {}
    if params.arch == "table":
        gt = np.zeros_like(t["table"])
        np.add.at(gt, cache["rows"], g)
        grads["table"] = gt
        return grads, None
    if params.arch in ("ffn", "siren"):
        a_list, z_list = cache["a"], cache["z"]
        delta = g
        for i in range(params.h, -1, -1):
            grads[f"W{i}"] = a_list[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ t[f"W{i}"].T
            if i > 0:
                z = z_list[i - 1]
                if params.arch == "siren":
                    w0 = SIREN_OMEGA0 if i == 1 else 1.0
                    delta = delta * np.cos(z) * w0
                else:
                    delta = delta * _act_grad(act, z, a_list[i])
        return {k: grads[k] for k in t}, delta
    grads["Wo"] = cache["y"].T @ g
    grads["bo"] = g.sum(axis=0)
    dy = g @ t["Wo"].T
    for j in range(N_RES_BLOCKS - 1, -1, -1):
        y_in, u, v, vd, mask = cache["blocks"][j]
        grads[f"B{j}.W2"] = vd.T @ dy
        grads[f"B{j}.b2"] = dy.sum(axis=0)
        dvd = dy @ t[f"B{j}.W2"].T
        dv = dvd * mask if mask is not None else dvd
        du = dv * _act_grad(act, u, v)
        grads[f"B{j}.W1"] = y_in.T @ du
        grads[f"B{j}.b1"] = du.sum(axis=0)
        dy = dy + du @ t[f"B{j}.W1"].T
    dzp = dy * _act_grad(act, cache["zp"], cache["yp"])
    grads["Wp"] = cache["x"].T @ dzp
    grads["bp"] = dzp.sum(axis=0)
    return {k: grads[k] for k in t}, dzp @ t["Wp"].T


# ---------------------------------------------------------------- losses

def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def loss_softmax_ce(logits, label):
    """Softmax cross-entropy and its gradient with respect to the logits.

    Accepts one logit vector with an int label, or a ``(B, C)`` batch with a
    label array; the batch loss is the mean and its gradient is scaled to
    match.
    """
    z = np.asarray(logits, dtype=np.float64)
    lab = np.asarray(label)
    single = z.ndim == 1
    if single:
        z, lab = z[None, :], lab.reshape(1)
    lab = lab.astype(np.int64)
    if np.any(lab < 0) or np.any(lab >= z.shape[1]):
        raise IndexError(f"label out of range for {z.shape[1]} classes")
    lp = log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = -lp[rows, lab].mean()
    grad = np.exp(lp)
    grad[rows, lab] -= 1.0
    grad /= z.shape[0]
    return float(loss), (grad[0] if single else grad)


def loss_mse(pred, target):
    """Squared error; for arrays the loss is the mean and the gradient matches it."""
    p = np.asarray(pred, dtype=np.float64)
    tt = np.asarray(target, dtype=np.float64)
    e = p - tt
    if p.ndim == 0:
        return float(e * e), float(2.0 * e)
    return float(np.mean(e * e)), 2.0 * e / e.size


# ---------------------------------------------------------------- optimiser

class AdamState:
    """First/second moment buffers keyed like the parameter dict."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}


def adam_step(params, grads, config: TrainConfig, t: int, state: Optional[AdamState] = None):
    """One bias-corrected Adam update; returns new parameters.

    ``params`` is an :class:`MlpParams` or a plain name -> array dict.  If any
    gradient is non-finite, :class:`NaNGradError` is raised before anything
    (parameters or moments) is modified.  L2 weight decay is added to the
    gradient.
    """
    if t < 1:
        raise DomainError(f"Adam step index must be >= 1, got {t}")
    tensors = params.tensors if isinstance(params, MlpParams) else params
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NaNGradError(f"non-finite gradient in {name!r}")
    if state is None:
        state = AdamState(tensors)
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = {}
    for name, p in tensors.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        if config.weight_decay:
            g = g + config.weight_decay * p
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        new[name] = p - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        if not np.all(np.isfinite(new[name])):
            raise NaNGradError(f"update produced non-finite values in {name!r}")
    return params.replace(new) if isinstance(params, MlpParams) else new


# ---------------------------------------------------------------- gradient check

def _scalar_loss(params, x, target):
    out, cache = forward_cache(params, x)
    if isinstance(target, (int, np.integer)):
        loss, g = loss_softmax_ce(out, np.full(out.shape[0], int(target)))
    else:
        tgt = np.broadcast_to(np.asarray(target, dtype=np.float64), out.shape)
        e = out - tgt
        loss = float(np.sum(e * e)) / out.shape[0]
        g = 2.0 * e / out.shape[0]
    return loss, g, cache


def finite_diff_check(params: MlpParams, pe, target, h: float = 1e-5,
                      floor: float = 1e-6) -> float:
    """Largest relative gap between backprop and central differences.

    ``target`` is a class index (softmax cross-entropy on the outputs) or a
    real target (squared error, summed over outputs, averaged over the
    batch).  The relative error of each coordinate is
    ``|g - fd| / max(|g|, |fd|, floor)``; every parameter is perturbed.
    """
    if not h > 0:
        raise DomainError("finite-difference step must be positive")
    x, _ = _as_batch(params, pe)
    _, g_out, cache = _scalar_loss(params, x, target)
    grads, _ = backprop(params, x, g_out, cache)
    worst = 0.0
    for name, arr in params.tensors.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar_loss(params, x, target)[0]
            flat[i] = orig - h
            fm = _scalar_loss(params, x, target)[0]
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TSPM"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


def save_checkpoint(path, params: MlpParams, extra: Optional[Mapping[str, np.ndarray]] = None,
                    sidecar: Optional[dict] = None) -> None:
    """Write a little-endian binary checkpoint plus ``<path>.json`` sidecar.

    Layout: ``b"TSPM"``, u32 version, u32 arch index, u32 activation index,
    u32 in_dim/k/h/d, u32 array count, then per array: u16 name length,
    utf-8 name, u8 dtype code (0 float64, 1 int64), u8 ndim, u32 dims, data.
    Network tensors come first in declaration order, then the table
    vocabulary, then ``extra``.
    """
    arrays = list(params.tensors.items())
    if params.vocab is not None:
        arrays.append(("vocab", params.vocab))
    arrays += list((extra or {}).items())
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<II", ARCHS.index(params.arch), ACTIVATIONS.index(params.activation))
    buf += struct.pack("<IIII", params.in_dim, params.k, params.h, params.d)
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    path = Path(path)
    path.write_bytes(bytes(buf))
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(params, extra, sidecar)``."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ShapeError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {version}")
    arch_i, act_i, in_dim, k, h, d, count = struct.unpack_from("<IIIIIII", data, 8)
    off = 36
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype=dt, count=size, offset=off).reshape(shape).copy()
        off += size * dt.itemsize
    arch = ARCHS[arch_i]
    tmpl = init_params(arch, in_dim, k, h, d, 0, ACTIVATIONS[act_i],
                       n_rows=1 if arch == "table" else None)
    tensors = {name: arrays.pop(name) for name in tmpl.tensors}
    vocab = arrays.pop("vocab", None)
    params = MlpParams(arch, in_dim, k, h, d, ACTIVATIONS[act_i], tensors, vocab)
    side = Path(str(path) + ".json")
    sidecar = json.loads(side.read_text()) if side.exists() else None
    return params, arrays, sidecar
