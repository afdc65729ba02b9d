"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (the lines are
repeated in the terminal summary) or ``python3 tests/test_acceptance.py``.
"""
import json
import math
import sys
import time

import numpy as np
import pytest

from locenc import geobias as gb
from locenc import nn
from locenc.cli import main as cli_main
from locenc.encoders import EncoderSpec, encode
from locenc.geo import EARTH_RADIUS_KM, destination_point, haversine_array, sample_uniform_sphere
from locenc.locbench import models, synth
from locenc.locbench.data import select_split

RESULTS = {}


def report(ac, ok, detail):
    line = f"AC-{ac:<2} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[ac] = line
    print(line)
    assert ok, line


def _brute_moran(x, W):
    n = len(x)
    xbar = sum(x) / n
    num = s0 = 0.0
    for i in range(n):
        for j in range(n):
            num += W[i][j] * (x[i] - xbar) * (x[j] - xbar)
            s0 += W[i][j]
    return n / s0 * num / sum((v - xbar) ** 2 for v in x)


def test_ac01_moran_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 51))
        k = int(rng.integers(2, 7))
        W = gb.knn_weights(sample_uniform_sphere(n, rng), k)
        x = rng.standard_normal(n)
        worst = max(worst, abs(gb.morans_i(x, W) - _brute_moran(list(x), W.to_dense().tolist())))
    dt = time.perf_counter() - t0
    report(1, worst <= 1e-10 and dt < 5, f"Moran's I vs double sum: max |d|={worst:.2e} (<=1e-10), {dt:.2f}s (<5s)")


def test_ac02_ring_fixtures():
    W = np.zeros((4, 4))
    for i in range(4):
        W[i, (i + 1) % 4] = W[i, (i - 1) % 4] = 1
    W = gb.WeightMatrix.from_dense(W)
    alt = gb.morans_i([1, -1, 1, -1], W)
    block = gb.morans_i([1, 1, -1, -1], W)
    report(2, abs(alt + 1) <= 1e-12 and abs(block) <= 1e-12,
           f"4-cycle alternating I={alt:.15f} (-1), block I={block:.2e} (0)")


def test_ac03_distance_preservation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    a, b = sample_uniform_sphere(1000, rng), sample_uniform_sphere(1000, rng)
    spec = EncoderSpec("sphereC", S=1, r_min=1.0, r_max=1.0)
    dots = np.sum(encode(spec, a) * encode(spec, b), axis=1)
    ang = haversine_array(a[:, 0], a[:, 1], b[:, 0], b[:, 1]) / EARTH_RADIUS_KM
    err = float(np.max(np.abs(dots - np.cos(ang))))
    dt = time.perf_counter() - t0
    report(3, err <= 1e-9 and dt < 1, f"sphereC dot vs cos(angle): max err={err:.2e} (<=1e-9), {dt:.3f}s (<1s)")


def test_ac04_gradient_checks():
    t0 = time.perf_counter()
    combos = [("ffn", a) for a in nn.ACTIVATIONS] + [("residual4", a) for a in nn.ACTIVATIONS] + [("siren", "sine")]
    worst = 0.0
    for arch, act in combos:
        for pt in range(10):
            rng = np.random.default_rng(1000 * len(arch) + pt)
            p = nn.init_params(arch, 4, 6, 2, 3, seed=pt, activation=act)
            p = p.replace({n: v + 0.1 * rng.standard_normal(v.shape) for n, v in p.tensors.items()})
            x = rng.uniform(-1, 1, size=(2, 4))
            target = pt % 3 if pt % 2 else rng.standard_normal(3)
            worst = max(worst, nn.finite_diff_check(p, x, target, h=1e-5))
    dt = time.perf_counter() - t0
    report(4, worst <= 1e-4 and dt < 30,
           f"{len(combos)} arch x activation combos x 10 points: max rel err={worst:.2e} (<=1e-4), {dt:.1f}s (<30s)")


def test_ac05_classification_boost():
    t0 = time.perf_counter()
    recs = synth.synth_dataset("sector_classes", 10_000, {"classes": 8}, seed=7)
    test = select_split(recs, "test")
    cfg = nn.TrainConfig(lr=3e-3, epochs=20, batch_size=128, seed=7)
    net = models.NetConfig("ffn", 128, 2)
    specs = {"sphereC": EncoderSpec("sphereC", S=8, r_min=0.01, r_max=1.0),
             "grid": EncoderSpec("grid", S=8, r_min=1.0, r_max=360.0),
             "theory": EncoderSpec("theory", S=8, r_min=1.0, r_max=360.0),
             "tile": EncoderSpec("tile", cell_deg=10.0)}
    floors = {"sphereC": 0.95, "grid": 0.95, "theory": 0.95, "tile": 0.90}
    img = synth.synth_image_logprobs([r.label for r in test], 8, 0.55, seed=77)
    top1, ok, boost = {}, True, None
    for name, spec in specs.items():
        model, _ = models.train_location_classifier(recs, spec, net, cfg, n_classes=8)
        rep, _ = models.evaluate_classifier(model, test, img if name == "sphereC" else None)
        top1[name] = rep["location_only"]["top1"]
        ok &= top1[name] >= floors[name]
        if name == "sphereC":
            boost = rep["combined"]["top1"] - rep["image_only"]["top1"]
            img_top1 = rep["image_only"]["top1"]
    dt = time.perf_counter() - t0
    ok &= boost >= 0.15 and dt < 300
    detail = ", ".join(f"{k}={v:.3f}" for k, v in top1.items())
    report(5, ok, f"location-only top-1 {detail}; combined-image={boost:.3f} (image-only {img_top1:.3f}); {dt:.0f}s")


def test_ac06_regression_fit():
    t0 = time.perf_counter()
    recs = synth.synth_dataset("smooth_field", 20_000, {"noise": 0.05}, seed=6)
    test = select_split(recs, "test")
    cfg = nn.TrainConfig(lr=3e-3, epochs=20, batch_size=128, seed=6)
    net = models.NetConfig("ffn", 128, 2)
    r2 = {}
    for name, spec in {"sphereC": EncoderSpec("sphereC", S=8, r_min=0.01, r_max=1.0),
                       "tile30": EncoderSpec("tile", cell_deg=30.0)}.items():
        model, _ = models.train_location_regressor(recs, spec, net, cfg)
        r2[name] = models.evaluate_regressor(model, test)[0]["location_only"]["r2"]
    dt = time.perf_counter() - t0
    ok = r2["sphereC"] >= 0.90 and r2["tile30"] <= r2["sphereC"] and dt < 300
    report(6, ok, f"sphereC R2={r2['sphereC']:.3f} (>=0.90), tile 30deg R2={r2['tile30']:.3f} (<= sphereC); {dt:.0f}s")


@pytest.fixture(scope="module")
def bias_points():
    return sample_uniform_sphere(5000, np.random.default_rng(11))


def test_ac07_geobias_ordering(bias_points):
    t0 = time.perf_counter()
    pts = bias_points
    centers = sample_uniform_sphere(5, np.random.default_rng(3))
    d = np.min([haversine_array(c[0], c[1], pts[:, 0], pts[:, 1]) for c in centers], axis=0)
    planted = np.where(d <= 700.0, -1.0, 1.0)
    n_low = int(np.sum(planted < 0))
    rand = np.ones(len(pts))
    rand[np.random.default_rng(4).choice(len(pts), n_low, replace=False)] = -1.0
    cfg = gb.GeoBiasConfig(radius_km=1000.0, k=4, n_permutations=199, seed=0, max_centers=200)
    a = gb.geo_bias_report(pts, cfg, labels=planted)
    b = gb.geo_bias_report(pts, cfg, labels=rand)
    dt = time.perf_counter() - t0
    gap = a.rel_mean - b.rel_mean
    report(7, gap >= 1.0 and dt < 180,
           f"{n_low} lows: rel_mean planted={a.rel_mean:.2f} vs random={b.rel_mean:.2f} bits, gap={gap:.2f} (>=1.0); {dt:.0f}s")


def test_ac08_null_calibration(bias_points):
    means = []
    for s in range(5):
        labels = np.random.default_rng(100 + s).choice([-1.0, 1.0], len(bias_points))
        cfg = gb.GeoBiasConfig(radius_km=1000.0, seed=s, max_centers=200)
        r = gb.geo_bias_report(bias_points, cfg, labels=labels)
        means.append(r.rel_mean)
    worst = max(abs(m) for m in means)
    report(8, worst <= 0.5 and all(not math.isnan(m) for m in means),
           "random labels rel_mean per seed: " + ", ".join(f"{m:+.3f}" for m in means) + " (|.|<=0.5)")


def test_ac09_determinism(tmp_path):
    d = tmp_path / "data"
    assert cli_main(["synth", "--kind", "sector_classes", "--n", "2000", "--classes", "8",
                     "--image-accuracy", "0.55", "--seed", "9", "--out", str(d)]) == 0
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({
        "task": "classify", "seed": 9,
        "encoder": {"kind": "sphereC", "S": 8, "r_min": 0.01},
        "nn": {"k": 64, "h": 2}, "train": {"lr": 0.003, "epochs": 5},
        "geobias": {"max_centers": 50},
        "paths": {"dataset": str(d / "dataset.csv"), "image_logprobs": str(d / "image_logprobs.csv")}}))
    outs = []
    for run in ("r1", "r2"):
        out = str(tmp_path / run)
        for cmd in ("train", "evaluate", "geobias"):
            assert cli_main([cmd, "--config", str(conf), "--out", out]) == 0
        outs.append(((tmp_path / run / "metrics.json").read_bytes(), (tmp_path / run / "geobias.json").read_bytes()))
    same = outs[0] == outs[1]
    report(9, same, "train -> evaluate -> geobias twice: metrics.json and geobias.json byte-identical=" + str(same))


def test_ac10_hotspot_sanity():
    rng = np.random.default_rng(10)
    bg = sample_uniform_sphere(2000, rng)
    center = (40.0, 20.0)
    dist = 400.0 * np.sqrt(rng.uniform(0, 1, 60))
    lon, lat = destination_point(center[0], center[1], rng.uniform(0, 2 * math.pi, 60), dist)
    pts = np.vstack([bg, np.column_stack([lon, lat])])
    x = np.r_[np.zeros(2000), np.ones(60)]
    W = gb.knn_weights(pts, 8)
    res = gb.getis_ord_gi_star(pts, x, W)
    bins = np.array(res.bins)
    in_cluster = np.mean(np.isin(bins[2000:], ["hot95", "hot99"]))
    far = haversine_array(center[0], center[1], pts[:2000, 0], pts[:2000, 1]) > 3000.0
    far_hot = np.mean(np.isin(bins[:2000][far], ["hot90", "hot95", "hot99"]))
    mirror = gb.getis_ord_gi_star(pts, 1 - x, W).z
    mirror_err = float(np.max(np.abs(mirror + res.z)))
    ok = in_cluster >= 0.8 and far_hot <= 0.05 and mirror_err <= 1e-9
    report(10, ok, f"in-cluster hot95+={in_cluster:.2f} (>=0.80), far hot90+={far_hot:.3f} (<=0.05), "
                   f"mirror |z+z'|max={mirror_err:.1e} (<=1e-9)")


def test_ac11_throughput():
    pts = sample_uniform_sphere(10_000, np.random.default_rng(1))
    labels = np.random.default_rng(2).choice([-1.0, 1.0], 10_000)
    cfg = gb.GeoBiasConfig(radius_km=1000.0, n_permutations=199, max_centers=500)
    t0 = time.perf_counter()
    r = gb.geo_bias_report(pts, cfg, labels=labels)
    dt = time.perf_counter() - t0
    report(11, dt < 600 and r.n_centers + r.n_skipped == 500,
           f"10^4 points, 500 centers, 199 permutations: {dt:.0f}s (<600s, single core)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
