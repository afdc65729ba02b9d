"""Spatial-autocorrelation tooling for measuring geographic bias of model
performance.

The scores are built on spatial self-information (SSI): Moran's I of a
labelling is standardised against its permutation distribution, the
two-sided Gaussian tail probability ``p`` of the resulting z-score is taken,
and the SSI is ``-log2(p)`` bits.  Around each low-performance observation
two scores are computed inside a radius neighbourhood:

* base score: SSI of observed locations (+1) against a regular lattice of
  unobserved background locations (-1), i.e. how clustered the data itself is;
* relative score: SSI of the high/low performance labels minus the mean SSI
  of random relabellings of the same points.

Reports average both over the neighbourhood centres.  Getis-Ord Gi* hot-spot
z-scores are provided for per-point maps.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.stats import norm

from .errors import (
    DomainError, JoinError, NoLowPerfError, SchemaError, ShapeError, TooFewPointsError,
    ZeroVarianceError,
)
from .geo import EARTH_RADIUS_KM, LocationDeg, destination_point, haversine_array, lonlat_to_xyz_array

_BRUTE_FORCE_MAX = 2048
_DENSE_MAX = 256
_CHUNK_FLOATS = 4_000_000
_DEDUP_KM = 1e-6


def _as_lonlat(points) -> np.ndarray:
    if isinstance(points, np.ndarray) and points.ndim == 2 and points.shape[1] == 2:
        return points.astype(np.float64, copy=False)
    arr = np.array([[p[0], p[1]] for p in points], dtype=np.float64)
    return arr.reshape(-1, 2)


# ---------------------------------------------------------------- weights

@dataclass(frozen=True)
class WeightMatrix:
    """Sparse non-negative connectivity in coordinate form, no self-loops."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise DomainError("weights must be non-negative")
        if np.any(self.rows == self.cols):
            raise DomainError("self-loops are not allowed")

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def to_sparse(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.weights, (self.rows, self.cols)), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        np.add.at(m, (self.rows, self.cols), self.weights)
        return m

    @classmethod
    def from_dense(cls, m) -> "WeightMatrix":
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError("weight matrix must be square")
        if np.any(np.diag(m) != 0):
            raise DomainError("self-loops are not allowed")
        r, c = np.nonzero(m)
        return cls(m.shape[0], r, c, m[r, c])


def _knn_rows_brute(ll, rows, kk):
    d = haversine_array(ll[rows, 0][:, None], ll[rows, 1][:, None], ll[:, 0][None, :], ll[:, 1][None, :])
    d[np.arange(rows.size), rows] = np.inf
    return np.argsort(d, axis=1, kind="stable")[:, :kk]


def knn_weights(points, k: int) -> WeightMatrix:
    """Binary k-nearest-neighbour weights by great-circle distance.

    Ties are broken by input index and ``k`` is clipped to ``n - 1``.  A point
    is never its own neighbour, but distinct points at identical coordinates
    are neighbours of each other.
    """
    ll = _as_lonlat(points)
    n = ll.shape[0]
    if n < 2:
        raise TooFewPointsError(f"need at least 2 points for a k-NN graph, got {n}")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    kk = min(int(k), n - 1)
    if n <= _BRUTE_FORCE_MAX:
        nbrs = np.concatenate([_knn_rows_brute(ll, np.arange(s, min(s + 512, n)), kk)
                               for s in range(0, n, 512)])
    else:
        # chord distance preserves great-circle order; candidates are re-ranked exactly
        q = min(n, kk + 17)
        _, cand = cKDTree(lonlat_to_xyz_array(ll)).query(lonlat_to_xyz_array(ll), k=q)
        nbrs = np.empty((n, kk), dtype=np.int64)
        redo = []
        for i in range(n):
            c = cand[i][cand[i] != i]
            d = haversine_array(ll[i, 0], ll[i, 1], ll[c, 0], ll[c, 1])
            order = np.lexsort((c, d))
            if c.size < kk + 1 or d[order[kk - 1]] >= d.max():
                redo.append(i)
                continue
            nbrs[i] = c[order[:kk]]
        if redo:
            redo = np.array(redo)
            nbrs[redo] = _knn_rows_brute(ll, redo, kk)
    rows = np.repeat(np.arange(n), kk)
    return WeightMatrix(n, rows, nbrs.reshape(-1).astype(np.int64), np.ones(n * kk))


# ---------------------------------------------------------------- Moran's I / SSI

def morans_i(values, W: WeightMatrix) -> float:
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size != W.n:
        raise ShapeError(f"{x.size} values for a {W.n}-node weight matrix")
    z = x - x.mean()
    den = float(z @ z)
    if den == 0.0 or np.ptp(x) == 0.0:
        raise ZeroVarianceError("Moran's I is undefined for constant values")
    if W.total == 0.0:
        raise DomainError("weight matrix has no non-zero entries")
    num = float(z @ (W.to_sparse() @ z))
    return W.n / W.total * num / den


def moran_null_reference(n: int) -> float:
    """Expected Moran's I under spatial randomness, ``-1/(n-1)``."""
    if n < 2:
        raise DomainError("n must be >= 2")
    return -1.0 / (n - 1)


def _morans_batch(X: np.ndarray, W: WeightMatrix, op) -> np.ndarray:
    """Moran's I for every row of ``X`` (rows with zero variance give nan)."""
    Z = X - X.mean(axis=1, keepdims=True)
    lag = (op @ Z.T).T if sparse.issparse(op) else Z @ op.T
    num = np.einsum("ij,ij->i", Z, lag)
    den = np.einsum("ij,ij->i", Z, Z)
    with np.errstate(invalid="ignore", divide="ignore"):
        return W.n / W.total * num / den


def _weight_operator(W: WeightMatrix):
    return W.to_dense() if W.n <= _DENSE_MAX else W.to_sparse()


def _tail_bits(z, p_min):
    p = np.clip(2.0 * norm.sf(np.abs(z)), p_min, 1.0)
    return -np.log2(p)


def _ssi_rows(V: np.ndarray, W: WeightMatrix, n_permutations: int, seeds: Sequence,
              p_min: float) -> np.ndarray:
    """SSI of each row of ``V``; row ``b`` draws its permutations from ``seeds[b]``."""
    B, n = V.shape
    out = np.zeros(B)
    op = _weight_operator(W)
    const = np.ptp(V, axis=1) == 0.0
    chunk = max(1, _CHUNK_FLOATS // max(1, n_permutations * n))
    live = np.flatnonzero(~const)
    for s in range(0, live.size, chunk):
        rows = live[s:s + chunk]
        perms = np.stack([
            np.random.default_rng(seeds[b]).permuted(np.tile(V[b], (n_permutations, 1)), axis=1)
            for b in rows
        ])
        i_obs = _morans_batch(V[rows], W, op)
        i_perm = _morans_batch(perms.reshape(-1, n), W, op).reshape(rows.size, n_permutations)
        mu = i_perm.mean(axis=1)
        sd = np.maximum(i_perm.std(axis=1, ddof=1), 1e-12)
        out[rows] = _tail_bits((i_obs - mu) / sd, p_min)
    return out


def ssi(values, W: WeightMatrix, n_permutations: int = 199, seed=0, p_min: float = 1e-12) -> float:
    """Spatial self-information of a labelling, in bits.

    Moran's I of ``values`` is standardised by the mean and standard
    deviation of Moran's I over ``n_permutations`` seeded shuffles of the
    same values; the SSI is ``-log2`` of the two-sided normal tail
    probability of that z-score, with the probability clamped to
    ``[p_min, 1]``.  Constant values carry no spatial information and score 0.
    """
    x = np.asarray(values, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != W.n:
        raise ShapeError(f"{x.shape[1]} values for a {W.n}-node weight matrix")
    if n_permutations < 2:
        raise DomainError("need at least 2 permutations to estimate a spread")
    return float(_ssi_rows(x, W, n_permutations, [_seed_seq(seed)], p_min)[0])


def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


# ---------------------------------------------------------------- configuration

_RULE_RE = re.compile(r"^(hit1_miss|abs_err_over_sigma|abs_err_over_percentile)(?:\(([^)]*)\))?$")


def parse_low_perf_rule(rule: str):
    """``"abs_err_over_sigma(3)"`` -> ``("abs_err_over_sigma", 3.0)``."""
    m = _RULE_RE.match(str(rule).replace(" ", ""))
    if not m:
        raise DomainError(f"unknown low-performance rule {rule!r}")
    name, arg = m.group(1), m.group(2)
    if name == "hit1_miss":
        if arg:
            raise DomainError("hit1_miss takes no parameter")
        return name, None
    if not arg:
        if name == "abs_err_over_percentile":
            raise DomainError("abs_err_over_percentile needs a percentile, e.g. (90)")
        return name, 1.0
    try:
        val = float(arg)
    except ValueError:
        raise DomainError(f"bad parameter in rule {rule!r}") from None
    if name == "abs_err_over_percentile" and not 0.0 <= val <= 100.0:
        raise DomainError("percentile must lie in [0, 100]")
    return name, val


def format_low_perf_rule(rule: str) -> str:
    name, val = parse_low_perf_rule(rule)
    return name if val is None else f"{name}({val:g})"


@dataclass(frozen=True)
class GeoBiasConfig:
    radius_km: float = 100.0
    k: int = 4
    n_permutations: int = 199
    seed: int = 0
    background_spacing_km: Optional[float] = None  # radius_km / 8 when unset
    p_min: float = 1e-12
    max_centers: Optional[int] = None
    low_perf_rule: str = "hit1_miss"

    def __post_init__(self):
        if not (isinstance(self.radius_km, (int, float)) and self.radius_km > 0 and math.isfinite(self.radius_km)):
            raise DomainError(f"radius_km must be positive, got {self.radius_km}")
        if self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k}")
        if self.n_permutations < 19:
            raise DomainError(f"n_permutations must be >= 19, got {self.n_permutations}")
        if self.background_spacing_km is None:
            object.__setattr__(self, "background_spacing_km", self.radius_km / 8.0)
        if not self.background_spacing_km > 0:
            raise DomainError("background_spacing_km must be positive")
        if not 0.0 < self.p_min < 1.0:
            raise DomainError("p_min must lie in (0, 1)")
        if self.max_centers is not None and self.max_centers < 1:
            raise DomainError("max_centers must be >= 1 when set")
        object.__setattr__(self, "low_perf_rule", format_low_perf_rule(self.low_perf_rule))


class GeoScore(NamedTuple):
    bits: float
    skipped: bool


class PerfLabeledPoint(NamedTuple):
    loc: LocationDeg
    value: int


# ---------------------------------------------------------------- neighbourhood scores

def extract_neighborhood(points, center, radius_km: float) -> np.ndarray:
    """Indices of all points within ``radius_km`` of ``center`` (closed ball)."""
    if not radius_km > 0:
        raise DomainError("radius_km must be positive")
    ll = _as_lonlat(points)
    d = haversine_array(center[0], center[1], ll[:, 0], ll[:, 1])
    return np.flatnonzero(d <= radius_km)


def background_lattice(center, radius_km: float, spacing_km: float) -> np.ndarray:
    """Square lattice of ``spacing_km`` in the azimuthal-equidistant plane
    around ``center``, clipped to the radius disc and mapped back to lon/lat.

    The centre itself is always a lattice site.
    """
    m = int(math.floor(radius_km / spacing_km + 1e-9))
    ticks = np.arange(-m, m + 1) * spacing_km
    east, north = np.meshgrid(ticks, ticks)
    east, north = east.ravel(), north.ravel()
    dist = np.hypot(east, north)
    keep = dist <= radius_km * (1.0 + 1e-12)
    lon, lat = destination_point(center[0], center[1], np.arctan2(east[keep], north[keep]), dist[keep])
    return np.column_stack([lon, lat])


def base_geo_bias(neighborhood_points, center, config: GeoBiasConfig, seed=None) -> GeoScore:
    """SSI of observed locations against the unobserved lattice background.

    Lattice sites that coincide with an observation count as observed and are
    dropped from the background.  Fewer than three points in total gives a
    skipped score of 0.
    """
    obs = _as_lonlat(neighborhood_points)
    if obs.shape[0] == 0:
        raise DomainError("neighbourhood must contain at least one observation")
    bg = background_lattice(center, config.radius_km, config.background_spacing_km)
    if bg.shape[0]:
        d = haversine_array(bg[:, 0][:, None], bg[:, 1][:, None], obs[:, 0][None, :], obs[:, 1][None, :])
        bg = bg[d.min(axis=1) > _DEDUP_KM]
    union = np.concatenate([obs, bg])
    if union.shape[0] < 3:
        return GeoScore(0.0, True)
    values = np.concatenate([np.ones(obs.shape[0]), -np.ones(bg.shape[0])])
    W = knn_weights(union, config.k)
    bits = ssi(values, W, config.n_permutations, config.seed if seed is None else seed, config.p_min)
    return GeoScore(bits, False)


def relative_geo_bias(neighborhood, config: GeoBiasConfig, labels=None, seed=None) -> GeoScore:
    """SSI of the performance labels minus the mean SSI of random relabellings.

    ``neighborhood`` is a list of :class:`PerfLabeledPoint`, or an ``(n, 2)``
    lon/lat array with +1 (high) / -1 (low) ``labels``.  The random
    relabellings are seeded shuffles of the same labels, so the
    low-performance count is preserved.  Constant labels or fewer than three
    points give a skipped score of 0.
    """
    pts, y = _split_labeled(neighborhood, labels)
    if y.size != pts.shape[0]:
        raise ShapeError("one label per neighbourhood point is required")
    if y.size < 3 or np.ptp(y) == 0.0:
        return GeoScore(0.0, True)
    root = _seed_seq(config.seed if seed is None else seed)
    shuffle_seq, *row_seqs = root.spawn(config.n_permutations + 2)
    P = config.n_permutations
    relabel = np.random.default_rng(shuffle_seq).permuted(np.tile(y, (P, 1)), axis=1)
    rows = np.vstack([y, relabel])
    W = knn_weights(pts, config.k)
    bits = _ssi_rows(rows, W, P, row_seqs, config.p_min)
    return GeoScore(float(bits[0] - bits[1:].mean()), False)


# ---------------------------------------------------------------- performance labels

def binarize_performance(records, predictions, rule: str) -> list:
    """Turn per-record predictions into +1/-1 performance labels.

    ``records`` supply id and location; ``predictions`` (objects with ``id``
    plus ``hit1`` or ``abs_err``) are joined by id.
    """
    name, val = parse_low_perf_rule(rule)
    by_id = {p.id: p for p in predictions}
    missing = [r.id for r in records if r.id not in by_id]
    if missing:
        raise JoinError(f"{len(missing)} record id(s) have no prediction; first: {missing[:10]}")
    joined = [by_id[r.id] for r in records]
    if name == "hit1_miss":
        if any(p.hit1 is None for p in joined):
            raise SchemaError("hit1_miss needs hit1 on every prediction")
        good = np.array([p.hit1 == 1 for p in joined], dtype=bool)
    else:
        if any(p.abs_err is None for p in joined):
            raise SchemaError(f"{name} needs abs_err on every prediction")
        e = np.array([p.abs_err for p in joined], dtype=np.float64)
        if e.size == 0:
            good = np.zeros(0, dtype=bool)
        elif name == "abs_err_over_sigma":
            good = ~(e > e.mean() + val * e.std())
        else:
            good = ~(e > np.percentile(e, val))
    return [PerfLabeledPoint(LocationDeg(float(r.lon), float(r.lat)), 1 if g else -1)
            for r, g in zip(records, good)]


# ---------------------------------------------------------------- report

@dataclass
class CenterDiagnostics:
    center_id: int
    lon: float
    lat: float
    n_neighborhood: int
    base: float
    rel: float
    skipped: bool


@dataclass
class GeoBiasReport:
    base_mean: float
    rel_mean: float
    n_centers: int
    n_skipped: int
    config: GeoBiasConfig
    per_center: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        def num(x):
            return None if math.isnan(x) else float(x)
        c = self.config
        return {"base_mean": num(self.base_mean), "rel_mean": num(self.rel_mean),
                "n_centers": self.n_centers, "n_skipped": self.n_skipped,
                "radius_km": c.radius_km, "k": c.k, "n_permutations": c.n_permutations,
                "seed": c.seed, "low_perf_rule": c.low_perf_rule}


def _split_labeled(points_with_labels, labels=None):
    if labels is not None:
        return _as_lonlat(points_with_labels), np.asarray(labels, dtype=np.float64).reshape(-1)
    pts = np.array([[p.loc[0], p.loc[1]] for p in points_with_labels], dtype=np.float64).reshape(-1, 2)
    vals = np.array([p.value for p in points_with_labels], dtype=np.float64)
    return pts, vals


def geo_bias_report(points_with_labels, config: GeoBiasConfig, labels=None) -> GeoBiasReport:
    """Average base and relative scores over low-performance neighbourhoods.

    Accepts a list of :class:`PerfLabeledPoint`, or an ``(n, 2)`` lon/lat
    array together with ``labels``.  Every low-performance point is a centre
    (a seeded subset when ``config.max_centers`` is set); the per-centre seed
    is derived from ``(config.seed, point index)``.  A centre whose base or
    relative score is skipped is left out of both means.
    """
    pts, y = _split_labeled(points_with_labels, labels)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DomainError("performance labels must be +1 or -1")
    low = np.flatnonzero(y == -1)
    if low.size == 0:
        raise NoLowPerfError("no low-performance observations to centre neighbourhoods on")
    centers = low
    if config.max_centers is not None and low.size > config.max_centers:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
        centers = np.sort(rng.choice(low, size=config.max_centers, replace=False))
    diags = []
    for c in centers:
        c = int(c)
        nbr = extract_neighborhood(pts, pts[c], config.radius_km)
        base = base_geo_bias(pts[nbr], pts[c], config, seed=(config.seed, c, 0))
        rel = relative_geo_bias(pts[nbr], config, labels=y[nbr], seed=(config.seed, c, 1))
        diags.append(CenterDiagnostics(c, float(pts[c, 0]), float(pts[c, 1]), int(nbr.size),
                                       base.bits, rel.bits, base.skipped or rel.skipped))
    used = [d for d in diags if not d.skipped]
    base_mean = float(np.mean([d.base for d in used])) if used else float("nan")
    rel_mean = float(np.mean([d.rel for d in used])) if used else float("nan")
    return GeoBiasReport(base_mean, rel_mean, len(used), len(diags) - len(used), config, diags)


def write_center_csv(path, report: GeoBiasReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["center_id", "lon", "lat", "n_neighborhood", "base", "rel", "skipped"])
        for d in report.per_center:
            w.writerow([d.center_id, repr(d.lon), repr(d.lat), d.n_neighborhood,
                        repr(d.base), repr(d.rel), int(d.skipped)])


# ---------------------------------------------------------------- hot spots

HOTSPOT_BINS = ((2.576, "hot99"), (1.96, "hot95"), (1.645, "hot90"))


class HotSpotResult(NamedTuple):
    z: np.ndarray
    bins: list


def hotspot_bin(z: float) -> str:
    for thr, name in HOTSPOT_BINS:
        if z >= thr:
            return name
        if z <= -thr:
            return name.replace("hot", "cold")
    return "nonsignificant"


def getis_ord_gi_star(points, values, W: WeightMatrix) -> HotSpotResult:
    """Getis-Ord Gi* z-scores with each point included in its own neighbourhood."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    n = x.size
    if n < 3:
        raise TooFewPointsError(f"Gi* needs at least 3 points, got {n}")
    if W.n != n or (points is not None and len(points) != n):
        raise ShapeError("points, values and weights must agree in size")
    xbar = x.mean()
    s = math.sqrt(max(float(np.mean(x * x)) - xbar * xbar, 0.0))
    if np.ptp(x) == 0.0 or s == 0.0:
        raise ZeroVarianceError("Gi* is undefined for constant values")
    Ws = W.to_sparse() + sparse.identity(n, format="csr")
    wsum = np.asarray(Ws.sum(axis=1)).reshape(-1)
    w2sum = np.asarray(Ws.multiply(Ws).sum(axis=1)).reshape(-1)
    num = Ws @ x - xbar * wsum
    den = s * np.sqrt((n * w2sum - wsum**2) / (n - 1))
    z = num / den
    return HotSpotResult(z, [hotspot_bin(v) for v in z])


def write_hotspot_csv(path, ids, points, result: HotSpotResult) -> None:
    ll = _as_lonlat(points)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lon", "lat", "z", "bin"])
        for rid, (lon, lat), z, b in zip(ids, ll, result.z, result.bins):
            w.writerow([rid, repr(float(lon)), repr(float(lat)), repr(float(z)), b])
