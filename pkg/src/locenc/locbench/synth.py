"""Seeded synthetic datasets standing in for real geo-tagged benchmarks."""
from __future__ import annotations

import math

import numpy as np

from ..errors import DomainError
from ..geo import EARTH_RADIUS_KM, destination_point, sample_uniform_sphere
from .data import DatasetRecord

SYNTH_KINDS = ("sector_classes", "cluster_classes", "smooth_field", "biased_clusters")
_DEFAULTS = {
    "sector_classes": {"classes": 8},
    "cluster_classes": {"classes": 8, "kappa": 50.0},
    "smooth_field": {"noise": 0.05},
    "biased_clusters": {"clusters": 5, "cluster_radius_km": 500.0},
}
DEFAULT_SPLITS = (0.7, 0.1, 0.2)


def synth_task(kind: str) -> str:
    return "regression" if kind == "smooth_field" else "classification"


def sector_label(lon, classes: int):
    """Index of the equal-width longitude sector containing ``lon``."""
    idx = np.floor((np.asarray(lon) + 180.0) * classes / 360.0).astype(np.int64)
    return np.clip(idx, 0, classes - 1)


def smooth_field_value(lonlat):
    lonlat = np.asarray(lonlat, dtype=np.float64)
    return np.sin(2.0 * np.radians(lonlat[..., 1])) * np.cos(np.radians(lonlat[..., 0]))


def sample_vmf_s2(mu_lonlat, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Von Mises-Fisher draws on the sphere around ``mu_lonlat`` (exact on S^2)."""
    u = rng.uniform(size=n)
    # inverse CDF of w = cos(angle from the mean direction)
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = np.clip(w, -1.0, 1.0)
    dist_km = np.arccos(w) * EARTH_RADIUS_KM
    bearing = rng.uniform(0.0, 2.0 * math.pi, size=n)
    lon, lat = destination_point(mu_lonlat[0], mu_lonlat[1], bearing, dist_km)
    return np.column_stack([lon, lat])


def sample_cap(center_lonlat, radius_km: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points in the spherical cap of ``radius_km`` around a center."""
    cos_max = math.cos(radius_km / EARTH_RADIUS_KM)
    cos_d = rng.uniform(cos_max, 1.0, size=n)
    dist_km = np.arccos(cos_d) * EARTH_RADIUS_KM
    bearing = rng.uniform(0.0, 2.0 * math.pi, size=n)
    lon, lat = destination_point(center_lonlat[0], center_lonlat[1], bearing, dist_km)
    return np.column_stack([lon, lat])


def assign_splits(n: int, rng: np.random.Generator, fractions=DEFAULT_SPLITS) -> np.ndarray:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise DomainError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    return labels[rng.permutation(n)]


def synth_dataset(kind: str, n: int, params: dict | None = None, seed: int = 0):
    """Generate ``n`` records of one synthetic kind.

    Parameters by kind (defaults in brackets):

    * ``sector_classes``: ``classes`` [8]; area-uniform points labelled by
      longitude sector.
    * ``cluster_classes``: ``classes`` [8], ``kappa`` [50]; von Mises-Fisher
      clusters around random centres, labelled by cluster.
    * ``smooth_field``: ``noise`` [0.05]; regression target
      ``sin(2 lat) cos(lon)`` plus Gaussian noise.
    * ``biased_clusters``: ``clusters`` [5], ``cluster_radius_km`` [500];
      points uniform inside disc clusters, labelled by cluster.

    Every kind also accepts ``splits`` (train, val, test fractions).
    """
    if kind not in SYNTH_KINDS:
        raise DomainError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    p = dict(_DEFAULTS[kind])
    p["splits"] = DEFAULT_SPLITS
    for key, val in (params or {}).items():
        if key not in p:
            raise DomainError(f"unknown parameter {key!r} for {kind}")
        p[key] = val
    rng = np.random.default_rng(seed)
    labels = targets = None

    if kind == "sector_classes":
        C = int(p["classes"])
        if C < 2:
            raise DomainError("sector_classes needs at least 2 classes")
        pts = sample_uniform_sphere(n, rng)
        labels = sector_label(pts[:, 0], C)
    elif kind == "cluster_classes":
        C, kappa = int(p["classes"]), float(p["kappa"])
        if C < 2 or kappa <= 0:
            raise DomainError("cluster_classes needs classes >= 2 and kappa > 0")
        centers = sample_uniform_sphere(C, rng)
        labels = rng.integers(0, C, size=n)
        pts = np.empty((n, 2))
        for c in range(C):
            sel = labels == c
            pts[sel] = sample_vmf_s2(centers[c], kappa, int(sel.sum()), rng)
    elif kind == "smooth_field":
        noise = float(p["noise"])
        if noise < 0:
            raise DomainError("noise must be non-negative")
        pts = sample_uniform_sphere(n, rng)
        targets = smooth_field_value(pts) + noise * rng.standard_normal(n)
    else:
        K, radius = int(p["clusters"]), float(p["cluster_radius_km"])
        if K < 1 or radius <= 0:
            raise DomainError("biased_clusters needs clusters >= 1 and cluster_radius_km > 0")
        centers = sample_uniform_sphere(K, rng)
        labels = rng.integers(0, K, size=n)
        pts = np.empty((n, 2))
        for c in range(K):
            sel = labels == c
            pts[sel] = sample_cap(centers[c], radius, int(sel.sum()), rng)

    splits = assign_splits(n, rng, p["splits"])
    width = len(str(n - 1))
    out = []
    for i in range(n):
        rec = DatasetRecord(f"{kind}_{i:0{width}d}", float(pts[i, 0]), float(pts[i, 1]), str(splits[i]))
        if labels is not None:
            rec.label = int(labels[i])
        else:
            rec.target = float(targets[i])
        out.append(rec)
    return out


def synth_image_logprobs(labels, n_classes: int, accuracy: float, seed: int,
                         confidence: float = 0.6) -> np.ndarray:
    """Weak stand-in image classifier outputs.

    Each record's top class is the true label with probability ``accuracy``
    and a uniformly chosen wrong class otherwise; the top class receives
    ``confidence`` of the mass and the rest is spread evenly.
    """
    if not 0.0 <= accuracy <= 1.0 or n_classes < 2:
        raise DomainError("accuracy must lie in [0, 1] and n_classes >= 2")
    if not 1.0 / n_classes < confidence < 1.0:
        raise DomainError("confidence must exceed 1/n_classes and be below 1")
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    correct = rng.uniform(size=y.size) < accuracy
    wrong = (y + rng.integers(1, n_classes, size=y.size)) % n_classes
    top = np.where(correct, y, wrong)
    probs = np.full((y.size, n_classes), (1.0 - confidence) / (n_classes - 1))
    probs[np.arange(y.size), top] = confidence
    return np.log(probs)
