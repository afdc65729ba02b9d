"""Position encoders: deterministic (or seeded) featurisations of lon/lat.

Every encoder maps an ``(n, 2)`` array of (lon, lat) degrees to an
``(n, output_dim(spec))`` array.  ``tile`` is the exception: it yields an
integer cell index per point which the ``table`` network looks up.

Multi-scale kinds use the geometric schedule from :func:`scale_factors`.
Planar kinds (``grid``, ``theory``) read coordinates in degrees, spherical
kinds in radians; ``rbf`` and ``rff`` work on ``(lon/180, lat/90)``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from .errors import DomainError, EmptyDatasetError, MissingAuxError
from .geo import LocationDeg, lonlat_to_xyz_array, validate_lonlat_array

KINDS = (
    "tile", "wrap", "wrap_ffn", "rbf", "rff", "grid", "theory", "xyz", "nerf",
    "sphereC", "sphereC_plus", "sphereM", "sphereM_plus", "dfs",
    "spherical_harmonics",
)
PLANAR_MULTISCALE = ("grid", "theory")
SPHERICAL_MULTISCALE = ("sphereC", "sphereC_plus", "sphereM", "sphereM_plus", "dfs")

_U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class EncoderSpec:
    """Full configuration of one position encoder.

    ``r_min``/``r_max`` default by kind: degrees (0.05, 360) for the planar
    multi-scale encoders, radians (1e-3, 1) otherwise.
    """

    kind: str
    S: int = 32
    r_min: Optional[float] = None
    r_max: Optional[float] = None
    W_dim: int = 512
    sigma: float = 1.0
    delta: float = 1.0
    L: int = 15
    cell_deg: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown encoder kind {self.kind!r}; expected one of {KINDS}")
        planar = self.kind in PLANAR_MULTISCALE
        if self.r_min is None:
            object.__setattr__(self, "r_min", 0.05 if planar else 1e-3)
        if self.r_max is None:
            object.__setattr__(self, "r_max", 360.0 if planar else 1.0)
        if int(self.S) != self.S or self.S < 1:
            raise DomainError(f"S must be a positive integer, got {self.S}")
        if not self.r_min > 0:
            raise DomainError(f"r_min must be positive, got {self.r_min}")
        if not self.r_max >= self.r_min:
            raise DomainError(f"r_max ({self.r_max}) must be >= r_min ({self.r_min})")
        if int(self.W_dim) != self.W_dim or self.W_dim < 1:
            raise DomainError(f"W_dim must be a positive integer, got {self.W_dim}")
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not self.delta > 0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if int(self.L) != self.L or self.L < 0:
            raise DomainError(f"L must be a non-negative integer, got {self.L}")
        if not self.cell_deg > 0:
            raise DomainError(f"cell_deg must be positive, got {self.cell_deg}")
        if int(self.seed) != self.seed or not 0 <= self.seed <= _U64_MAX:
            raise DomainError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        for name in ("S", "W_dim", "L", "seed"):
            object.__setattr__(self, name, int(getattr(self, name)))
        for name in ("r_min", "r_max", "sigma", "delta", "cell_deg"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise DomainError(f"unknown encoder fields: {sorted(unknown)}")
        return cls(**d)


class RbfAnchors(NamedTuple):
    anchors: np.ndarray  # (W_dim, 2) lon/lat degrees


class RffParams(NamedTuple):
    omegas: np.ndarray  # (W_dim, 2)
    shifts: np.ndarray  # (W_dim,)


Aux = Union[RbfAnchors, RffParams, None]


def scale_factors(S: int, r_min: float, r_max: float) -> np.ndarray:
    """Geometric scale schedule ``r_min * (r_max/r_min) ** (s/(S-1))``."""
    if S < 1 or not r_min > 0 or not r_max >= r_min:
        raise DomainError(f"invalid scale schedule S={S}, r_min={r_min}, r_max={r_max}")
    if S == 1:
        return np.array([float(r_min)])
    g = r_max / r_min
    return r_min * g ** (np.arange(S) / (S - 1.0))


def output_dim(spec: EncoderSpec) -> int:
    k, S = spec.kind, spec.S
    per_scale = {"nerf": 6, "grid": 4, "theory": 6, "sphereC": 3, "sphereC_plus": 7,
                 "sphereM": 5, "sphereM_plus": 9, "dfs": 6}
    if k in ("wrap", "wrap_ffn"):
        return 4
    if k == "xyz":
        return 3
    if k in per_scale:
        return per_scale[k] * S
    if k in ("rbf", "rff"):
        return spec.W_dim
    if k == "spherical_harmonics":
        return (spec.L + 1) ** 2
    return 1  # tile


def tile_grid_shape(cell_deg: float) -> tuple[int, int]:
    """Number of (longitude, latitude) cells for a tile resolution."""
    return math.ceil(360.0 / cell_deg - 1e-9), math.ceil(180.0 / cell_deg - 1e-9)


def tile_index(lonlat: np.ndarray, cell_deg: float) -> np.ndarray:
    n_lon, n_lat = tile_grid_shape(cell_deg)
    ix = np.minimum(np.floor((lonlat[:, 0] + 180.0) / cell_deg), n_lon - 1)
    iy = np.minimum(np.floor((lonlat[:, 1] + 90.0) / cell_deg), n_lat - 1)
    return (ix + n_lon * iy).astype(np.int64)


def _normalized(lonlat: np.ndarray) -> np.ndarray:
    return lonlat / np.array([180.0, 90.0])


def _interleave(*cols) -> np.ndarray:
    # each col is (n, S); output groups all terms of one scale together
    return np.stack(cols, axis=-1).reshape(cols[0].shape[0], -1)


_THEORY_DIRS = np.array([[1.0, 0.0],
                         [-0.5, math.sqrt(3.0) / 2.0],
                         [-0.5, -math.sqrt(3.0) / 2.0]])


def _spherical_terms(kind: str, lam: np.ndarray, phi: np.ndarray, alphas: np.ndarray):
    ls = lam[:, None] / alphas
    ps = phi[:, None] / alphas
    sin_l, cos_l, sin_p, cos_p = np.sin(ls), np.cos(ls), np.sin(ps), np.cos(ps)
    if kind == "sphereC":
        return _interleave(sin_p, cos_p * cos_l, cos_p * sin_l)
    if kind == "sphereC_plus":
        return _interleave(sin_p, cos_p * cos_l, cos_p * sin_l, sin_l, cos_l, cos_p, sin_p)
    if kind == "dfs":
        return _interleave(sin_p, cos_p, sin_l, cos_l, cos_p * sin_l, cos_p * cos_l)
    # sphereM mixes every scale with the finest one
    l0 = lam[:, None] / alphas[0]
    p0 = phi[:, None] / alphas[0]
    sin_l0 = np.broadcast_to(np.sin(l0), ls.shape)
    cos_l0 = np.broadcast_to(np.cos(l0), ls.shape)
    cos_p0 = np.broadcast_to(np.cos(p0), ls.shape)
    terms = [sin_p, cos_p * cos_l0, cos_p0 * cos_l, cos_p * sin_l0, cos_p0 * sin_l]
    if kind == "sphereM_plus":
        terms += [sin_l, cos_l, sin_p, cos_p]
    return _interleave(*terms)


def real_spherical_harmonics(lonlat: np.ndarray, L: int) -> np.ndarray:
    """Orthonormal real spherical harmonics up to degree ``L``.

    Columns are ordered ``l = 0..L`` and within each degree ``m = -l..l``.
    Negative orders carry ``sin(|m| lon)``, positive ``cos(m lon)``; no
    Condon-Shortley phase.  Colatitude is ``pi/2 - lat``.
    """
    lam = np.radians(lonlat[:, 0])
    phi = np.radians(lonlat[:, 1])
    x = np.sin(phi)       # cos(colatitude)
    sx = np.cos(phi)      # sin(colatitude) >= 0
    n = lonlat.shape[0]
    out = np.empty((n, (L + 1) ** 2))
    # fully normalised associated Legendre functions, stepping up in l at fixed m
    p_mm = np.full(n, math.sqrt(1.0 / (4.0 * math.pi)))
    for m in range(L + 1):
        if m > 0:
            p_mm = p_mm * math.sqrt((2.0 * m + 1.0) / (2.0 * m)) * sx
        if m == 0:
            cos_m, sin_m, fac = None, None, 1.0
        else:
            cos_m, sin_m, fac = np.cos(m * lam), np.sin(m * lam), math.sqrt(2.0)
        p_prev2, p_prev = None, p_mm
        for l in range(m, L + 1):
            if l == m:
                p = p_mm
            elif l == m + 1:
                p = math.sqrt(2.0 * m + 3.0) * x * p_mm
            else:
                a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
                b = math.sqrt((2.0 * l + 1.0) * ((l - 1.0) ** 2 - m * m)
                              / ((2.0 * l - 3.0) * (l * l - m * m)))
                p = a * x * p_prev - b * p_prev2
            if l > m:
                p_prev2, p_prev = p_prev, p
            base = l * l + l
            if m == 0:
                out[:, base] = p
            else:
                out[:, base + m] = fac * p * cos_m
                out[:, base - m] = fac * p * sin_m
    return out


def encode(spec: EncoderSpec, lonlat, aux: Aux = None) -> np.ndarray:
    """Batch position encoding of an ``(n, 2)`` lon/lat array."""
    ll = validate_lonlat_array(lonlat)
    kind = spec.kind
    if kind in ("rbf", "rff"):
        want = RbfAnchors if kind == "rbf" else RffParams
        if not isinstance(aux, want):
            raise MissingAuxError(f"{kind} encoder needs {want.__name__}")
    if kind == "tile":
        return tile_index(ll, spec.cell_deg)[:, None]
    if kind in ("wrap", "wrap_ffn"):
        a = math.pi * _normalized(ll)
        return np.column_stack([np.sin(a[:, 0]), np.cos(a[:, 0]),
                                np.sin(a[:, 1]), np.cos(a[:, 1])])
    if kind == "rbf":
        diff = _normalized(ll)[:, None, :] - _normalized(aux.anchors)[None, :, :]
        return np.exp(-np.sum(diff**2, axis=-1) / (2.0 * spec.sigma**2))
    if kind == "rff":
        proj = _normalized(ll) @ aux.omegas.T + aux.shifts
        return math.sqrt(2.0 / aux.omegas.shape[0]) * np.cos(proj)
    if kind == "xyz":
        return lonlat_to_xyz_array(ll)
    if kind == "nerf":
        xyz = lonlat_to_xyz_array(ll)
        freqs = (2.0 ** np.arange(spec.S)) * math.pi
        arg = xyz[:, None, :] * freqs[None, :, None]  # (n, S, 3)
        return np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(ll.shape[0], -1)
    if kind == "spherical_harmonics":
        return real_spherical_harmonics(ll, spec.L)

    alphas = scale_factors(spec.S, spec.r_min, spec.r_max)
    if kind == "grid":
        ls = ll[:, 0:1] / alphas
        ps = ll[:, 1:2] / alphas
        return _interleave(np.sin(ls), np.cos(ls), np.sin(ps), np.cos(ps))
    if kind == "theory":
        proj = ll @ _THEORY_DIRS.T  # (n, 3)
        arg = proj[:, None, :] / alphas[None, :, None]  # (n, S, 3)
        return np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(ll.shape[0], -1)
    return _spherical_terms(kind, np.radians(ll[:, 0]), np.radians(ll[:, 1]), alphas)


def encode_position(spec: EncoderSpec, loc: LocationDeg, aux: Aux = None) -> np.ndarray:
    """Encode a single location; returns a 1-D vector of length ``output_dim(spec)``."""
    return encode(spec, np.array([[loc[0], loc[1]]], dtype=np.float64), aux)[0]


def sample_rbf_anchors(train_locs, W_dim: int, seed: int) -> RbfAnchors:
    """Draw ``W_dim`` anchor points from the training locations.

    Sampling is without replacement whenever there are enough points.
    """
    locs = np.asarray(train_locs, dtype=np.float64).reshape(-1, 2)
    n = locs.shape[0]
    if n == 0:
        raise EmptyDatasetError("cannot sample RBF anchors from an empty training split")
    if W_dim < 1:
        raise DomainError(f"W_dim must be positive, got {W_dim}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=W_dim, replace=n < W_dim)
    return RbfAnchors(locs[idx].copy())


def sample_rff_params(W_dim: int, delta: float, seed: int) -> RffParams:
    if W_dim < 1:
        raise DomainError(f"W_dim must be positive, got {W_dim}")
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    rng = np.random.default_rng(seed)
    omegas = rng.normal(0.0, delta, size=(W_dim, 2))
    shifts = rng.uniform(0.0, 2.0 * math.pi, size=W_dim)
    return RffParams(omegas, shifts)


def build_aux(spec: EncoderSpec, train_lonlat=None) -> Aux:
    """Sample the seeded auxiliary parameters a kind needs (``None`` otherwise)."""
    if spec.kind == "rbf":
        if train_lonlat is None:
            raise MissingAuxError("rbf anchors are sampled from training locations")
        return sample_rbf_anchors(train_lonlat, spec.W_dim, spec.seed)
    if spec.kind == "rff":
        return sample_rff_params(spec.W_dim, spec.delta, spec.seed)
    return None
