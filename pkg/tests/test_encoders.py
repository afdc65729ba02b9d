import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import sph_harm_y

from locenc.encoders import (
    KINDS, EncoderSpec, build_aux, encode, encode_position, output_dim, real_spherical_harmonics,
    sample_rbf_anchors, sample_rff_params, scale_factors, tile_grid_shape, tile_index,
)
from locenc.errors import DomainError, EmptyDatasetError, MissingAuxError
from locenc.geo import LocationDeg, great_circle_angle_rad, sample_uniform_sphere


def _spec(kind, **kw):
    kw.setdefault("S", 4)
    kw.setdefault("W_dim", 16)
    kw.setdefault("L", 3)
    return EncoderSpec(kind, **kw)


def _encode_any(spec, pts):
    return encode(spec, pts, build_aux(spec, pts))


# ---------------------------------------------------------------- schedules and dims

def test_scale_factor_examples():
    np.testing.assert_allclose(scale_factors(1, 0.5, 360), [0.5])
    np.testing.assert_allclose(scale_factors(3, 1, 100), [1, 10, 100], rtol=1e-14)
    np.testing.assert_allclose(scale_factors(2, 1, 360), [1, 360], rtol=1e-14)
    for bad in [(0, 1, 2), (2, 0, 1), (2, 2, 1), (2, -1, 1)]:
        with pytest.raises(DomainError):
            scale_factors(*bad)


@given(st.integers(1, 64), st.floats(1e-4, 10), st.floats(1, 1e3))
def test_scale_factors_monotone_and_endpoints(S, r_min, ratio):
    a = scale_factors(S, r_min, r_min * ratio)
    assert a.size == S
    assert np.all(np.diff(a) >= 0)
    assert a[0] == pytest.approx(r_min)
    assert a[-1] == pytest.approx(r_min if S == 1 else r_min * ratio)


def test_output_dim_table():
    S = 5
    expected = {"wrap": 4, "wrap_ffn": 4, "xyz": 3, "nerf": 6 * S, "grid": 4 * S, "theory": 6 * S,
                "sphereC": 3 * S, "sphereC_plus": 7 * S, "sphereM": 5 * S, "sphereM_plus": 9 * S,
                "dfs": 6 * S, "rbf": 21, "rff": 21, "spherical_harmonics": 16, "tile": 1}
    assert set(expected) == set(KINDS)
    for kind, dim in expected.items():
        assert output_dim(EncoderSpec(kind, S=S, W_dim=21, L=3)) == dim
    assert output_dim(EncoderSpec("grid", S=4)) == 16


@pytest.mark.parametrize("kind", KINDS)
def test_encoded_width_matches_output_dim(kind, rng):
    spec = _spec(kind)
    pts = sample_uniform_sphere(100, rng)
    out = _encode_any(spec, pts)
    assert out.shape == (100, output_dim(spec))
    assert np.all(np.isfinite(out))
    single = encode_position(spec, LocationDeg(*pts[3]), build_aux(spec, pts))
    np.testing.assert_allclose(single, out[3], rtol=0, atol=1e-12)


# ---------------------------------------------------------------- spec validation

def test_spec_defaults_by_kind():
    g = EncoderSpec("grid")
    assert (g.r_min, g.r_max) == (0.05, 360.0)
    s = EncoderSpec("sphereC")
    assert (s.r_min, s.r_max) == (1e-3, 1.0)
    assert (s.S, s.W_dim, s.sigma, s.delta, s.cell_deg, s.L) == (32, 512, 1.0, 1.0, 1.0, 15)


@pytest.mark.parametrize("kw", [dict(kind="nope"), dict(kind="grid", S=0), dict(kind="grid", r_min=-1.0),
                                dict(kind="grid", r_min=2.0, r_max=1.0), dict(kind="rbf", sigma=0.0),
                                dict(kind="rff", delta=-1.0), dict(kind="tile", cell_deg=0.0),
                                dict(kind="xyz", L=-1), dict(kind="xyz", seed=-1), dict(kind="xyz", W_dim=0)])
def test_spec_rejects_invalid(kw):
    with pytest.raises(DomainError):
        EncoderSpec(**kw)


def test_spec_dict_round_trip():
    spec = EncoderSpec("rff", S=3, W_dim=7, delta=2.5, seed=99)
    assert EncoderSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(DomainError):
        EncoderSpec.from_dict({"kind": "xyz", "extra": 1})


# ---------------------------------------------------------------- per-kind formulas

def test_wrap_origin():
    np.testing.assert_allclose(encode_position(EncoderSpec("wrap"), LocationDeg(0, 0)), [0, 1, 0, 1])


def test_sphere_c_origin_and_right_angle():
    spec = EncoderSpec("sphereC", S=1, r_min=1.0, r_max=1.0)
    np.testing.assert_allclose(encode_position(spec, LocationDeg(0, 0)), [0, 1, 0], atol=1e-15)
    a = encode_position(spec, LocationDeg(0, 0))
    b = encode_position(spec, LocationDeg(90, 0))
    assert abs(a @ b) <= 1e-12


def test_grid_and_theory_formulas():
    ll = np.array([[30.0, -20.0]])
    alphas = scale_factors(3, 1.0, 360.0)
    grid = encode(EncoderSpec("grid", S=3, r_min=1.0, r_max=360.0), ll)[0].reshape(3, 4)
    for s, a in enumerate(alphas):
        np.testing.assert_allclose(grid[s], [math.sin(30 / a), math.cos(30 / a),
                                             math.sin(-20 / a), math.cos(-20 / a)], atol=1e-15)
    th = encode(EncoderSpec("theory", S=3, r_min=1.0, r_max=360.0), ll)[0].reshape(3, 3, 2)
    dirs = [(1, 0), (-0.5, math.sqrt(3) / 2), (-0.5, -math.sqrt(3) / 2)]
    for s, a in enumerate(alphas):
        for j, (u, v) in enumerate(dirs):
            p = (30 * u - 20 * v) / a
            np.testing.assert_allclose(th[s, j], [math.sin(p), math.cos(p)], atol=1e-14)


def test_spherical_multiscale_terms():
    lon, lat = 40.0, 25.0
    lam, phi = math.radians(lon), math.radians(lat)
    S, r_min, r_max = 3, 0.1, 1.0
    a = scale_factors(S, r_min, r_max)
    ll = np.array([[lon, lat]])

    def get(kind, per):
        return encode(EncoderSpec(kind, S=S, r_min=r_min, r_max=r_max), ll)[0].reshape(S, per)

    sc, scp, sm, smp, dfs = (get("sphereC", 3), get("sphereC_plus", 7), get("sphereM", 5),
                             get("sphereM_plus", 9), get("dfs", 6))
    for s in range(S):
        sl, cl, sp, cp = (math.sin(lam / a[s]), math.cos(lam / a[s]), math.sin(phi / a[s]), math.cos(phi / a[s]))
        sl0, cl0, cp0 = math.sin(lam / a[0]), math.cos(lam / a[0]), math.cos(phi / a[0])
        np.testing.assert_allclose(sc[s], [sp, cp * cl, cp * sl], atol=1e-14)
        np.testing.assert_allclose(scp[s], [sp, cp * cl, cp * sl, sl, cl, cp, sp], atol=1e-14)
        np.testing.assert_allclose(sm[s], [sp, cp * cl0, cp0 * cl, cp * sl0, cp0 * sl], atol=1e-14)
        np.testing.assert_allclose(smp[s], [sp, cp * cl0, cp0 * cl, cp * sl0, cp0 * sl, sl, cl, sp, cp],
                                   atol=1e-14)
        np.testing.assert_allclose(dfs[s], [sp, cp, sl, cl, cp * sl, cp * cl], atol=1e-14)


def test_nerf_terms():
    lon, lat = -70.0, 12.0
    xyz = [math.cos(math.radians(lat)) * math.cos(math.radians(lon)),
           math.cos(math.radians(lat)) * math.sin(math.radians(lon)), math.sin(math.radians(lat))]
    out = encode(EncoderSpec("nerf", S=3), np.array([[lon, lat]]))[0].reshape(3, 3, 2)
    for s in range(3):
        for c in range(3):
            f = 2**s * math.pi * xyz[c]
            np.testing.assert_allclose(out[s, c], [math.sin(f), math.cos(f)], atol=1e-13)


def test_tile_index_and_edges():
    spec = EncoderSpec("tile", cell_deg=10.0)
    assert tile_grid_shape(10.0) == (36, 18)
    ll = np.array([[-180.0, -90.0], [-175.0, -85.0], [5.0, 5.0], [180.0, 90.0], [-180.0, 0.0]])
    idx = encode(spec, ll)[:, 0]
    assert idx.dtype.kind == "i"
    assert list(idx) == [0, 0, 18 + 36 * 9, 35 + 36 * 17, 36 * 9]
    assert tile_index(ll, 10.0).max() < 36 * 18


def test_rbf_and_rff_formulas(rng):
    pts = sample_uniform_sphere(5, rng)
    anchors = sample_rbf_anchors(pts, 3, seed=1)
    spec = EncoderSpec("rbf", W_dim=3, sigma=0.7)
    out = encode(spec, pts, anchors)
    x = pts / [180, 90]
    a = anchors.anchors / [180, 90]
    expect = np.exp(-((x[:, None] - a[None]) ** 2).sum(-1) / (2 * 0.7**2))
    np.testing.assert_allclose(out, expect, rtol=1e-14)
    rff = sample_rff_params(4, 2.0, seed=3)
    out = encode(EncoderSpec("rff", W_dim=4, delta=2.0), pts, rff)
    expect = math.sqrt(2 / 4) * np.cos(x @ rff.omegas.T + rff.shifts)
    np.testing.assert_allclose(out, expect, rtol=1e-14)


def test_missing_aux():
    ll = np.zeros((1, 2))
    with pytest.raises(MissingAuxError):
        encode(EncoderSpec("rbf"), ll)
    with pytest.raises(MissingAuxError):
        encode(EncoderSpec("rff"), ll, sample_rbf_anchors(ll, 2, 0))


# ---------------------------------------------------------------- samplers

def test_rbf_anchor_sampling():
    one = sample_rbf_anchors([[10.0, 20.0]], 3, seed=0)
    np.testing.assert_array_equal(one.anchors, [[10, 20]] * 3)
    pts = np.column_stack([np.linspace(-170, 170, 100), np.linspace(-80, 80, 100)])
    a = sample_rbf_anchors(pts, 100, seed=4)
    assert sorted(map(tuple, a.anchors)) == sorted(map(tuple, pts))
    np.testing.assert_array_equal(a.anchors, sample_rbf_anchors(pts, 100, seed=4).anchors)
    with pytest.raises(EmptyDatasetError):
        sample_rbf_anchors(np.zeros((0, 2)), 3, 0)


def test_rff_sampling():
    p1, p2 = sample_rff_params(10_000, 1.0, 5), sample_rff_params(10_000, 1.0, 5)
    np.testing.assert_array_equal(p1.omegas, p2.omegas)
    np.testing.assert_array_equal(p1.shifts, p2.shifts)
    assert 0.97 <= p1.omegas.std() <= 1.03
    assert np.all((p1.shifts >= 0) & (p1.shifts < 2 * math.pi))
    with pytest.raises(DomainError):
        sample_rff_params(4, 0.0, 1)


# ---------------------------------------------------------------- properties

@pytest.mark.parametrize("kind", [k for k in KINDS if k not in ("tile", "rbf", "spherical_harmonics")])
def test_boundedness(kind, rng):
    spec = _spec(kind)
    out = _encode_any(spec, sample_uniform_sphere(200, rng))
    bound = math.sqrt(2 / spec.W_dim) if kind == "rff" else 1.0
    assert np.all(np.abs(out) <= bound + 1e-12)


def test_rbf_range(rng):
    spec = _spec("rbf")
    out = _encode_any(spec, sample_uniform_sphere(200, rng))
    assert np.all((out > 0) & (out <= 1))


@pytest.mark.parametrize("spec", [
    EncoderSpec("wrap"), EncoderSpec("xyz"), EncoderSpec("nerf", S=4),
    # a full 2*pi longitude period in degrees needs a scale of 180/pi
    EncoderSpec("grid", S=1, r_min=180 / math.pi, r_max=360.0),
    *[EncoderSpec(k, S=1, r_min=1.0, r_max=1.0) for k in ("sphereC", "sphereC_plus", "sphereM", "sphereM_plus", "dfs")],
])
def test_longitude_periodicity(spec):
    lat = np.linspace(-90, 90, 13)
    west = encode(spec, np.column_stack([np.full(13, -180.0), lat]))
    east = encode(spec, np.column_stack([np.full(13, 180.0), lat]))
    np.testing.assert_allclose(west, east, atol=1e-9)


def test_sphere_c_distance_preservation(rng):
    spec = EncoderSpec("sphereC", S=1, r_min=1.0, r_max=1.0)
    a, b = sample_uniform_sphere(1000, rng), sample_uniform_sphere(1000, rng)
    dots = np.sum(encode(spec, a) * encode(spec, b), axis=1)
    ang = np.array([great_circle_angle_rad(LocationDeg(*p), LocationDeg(*q)) for p, q in zip(a, b)])
    np.testing.assert_allclose(dots, np.cos(ang), atol=1e-9)


def test_spherical_harmonics_match_scipy(rng):
    L = 6
    ll = sample_uniform_sphere(50, rng)
    ours = real_spherical_harmonics(ll, L)
    theta = np.radians(90 - ll[:, 1])
    lam = np.radians(ll[:, 0])
    col = 0
    for l in range(L + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), theta, lam)
            # scipy includes the Condon-Shortley phase; the real form here does not
            if m == 0:
                ref = y.real
            elif m > 0:
                ref = math.sqrt(2) * (-1) ** m * y.real
            else:
                ref = math.sqrt(2) * (-1) ** m * y.imag
            np.testing.assert_allclose(ours[:, col], ref, atol=1e-12)
            col += 1


def test_spherical_harmonics_orthonormal():
    ll = sample_uniform_sphere(100_000, np.random.default_rng(2))
    Y = real_spherical_harmonics(ll, 3)
    gram = 4 * math.pi * (Y.T @ Y) / ll.shape[0]
    assert np.max(np.abs(gram - np.eye(16))) <= 0.02


def test_spherical_harmonics_poles_finite():
    Y = real_spherical_harmonics(np.array([[0.0, 90.0], [123.0, -90.0]]), 15)
    assert np.all(np.isfinite(Y))
    # only m = 0 survives at the poles
    m_zero = [l * l + l for l in range(16)]
    mask = np.ones(256, bool)
    mask[m_zero] = False
    assert np.max(np.abs(Y[:, mask])) <= 1e-12


def test_rff_kernel_approximation(rng):
    delta = 1.5
    params = sample_rff_params(4096, delta, seed=8)
    spec = EncoderSpec("rff", W_dim=4096, delta=delta)
    a, b = sample_uniform_sphere(100, rng), sample_uniform_sphere(100, rng)
    dots = np.sum(encode(spec, a, params) * encode(spec, b, params), axis=1)
    d2 = np.sum((a / [180, 90] - b / [180, 90]) ** 2, axis=1)
    np.testing.assert_allclose(dots, np.exp(-delta**2 * d2 / 2), atol=0.05)


@given(st.sampled_from([k for k in KINDS if k not in ("rbf", "rff")]),
       st.floats(-180, 180), st.floats(-90, 90))
def test_encoding_deterministic(kind, lon, lat):
    spec = _spec(kind)
    a = encode_position(spec, LocationDeg(lon, lat))
    assert np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, encode_position(spec, LocationDeg(lon, lat)))
