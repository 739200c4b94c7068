import math

import numpy as np
import pytest

from lyapsyn.kfuncs import smooth_step
from lyapsyn.minimax import b_tilde
from lyapsyn.model import DisturbancePath, builtin_system
from lyapsyn.unitloop import (
    CoverageError,
    Covering,
    GridSpec,
    SegmentFeedback,
    WorkingRegion,
    average_decrease,
    boundary_smoothness_check,
    build_covering,
)

S3 = builtin_system("S3_scalar_integrator")


@pytest.fixture(scope="module")
def s3_cover():
    model, cert = S3
    region = WorkingRegion(0.0, 1.0, 0.5, 2.0)
    cov = build_covering(model, cert, region, GridSpec(nt=17, nr=24, nd=2), seed=0)
    return model, cert, cov


def _region_samples(region, n, n_dim, seed):
    rng = np.random.default_rng(seed)
    ts = rng.uniform(region.t_lo, region.t_hi, n)
    rs = np.exp(rng.uniform(math.log(region.x_lo), math.log(region.x_hi), n))
    ds = rng.standard_normal((n, n_dim))
    ds /= np.linalg.norm(ds, axis=1, keepdims=True)
    return ts, rs[:, None] * ds


def test_partition_sums_to_one(s3_cover):
    model, cert, cov = s3_cover
    ts, xs = _region_samples(cov.region, 100, model.n, seed=1)
    for t, x in zip(ts, xs):
        bands = cov.bands_at(t, x)
        assert bands.theta.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.all(bands.theta > 0)


def test_controls_respect_budget(s3_cover):
    model, cert, cov = s3_cover
    for i in range(cov.size):
        cap = float(cert.b(max(cov.centers_t[i], 0.0), cov.centers_x[i]))
        assert np.linalg.norm(cov.controls[i]) <= cap + 1e-12


def test_single_center_degenerate():
    model, cert = S3
    region = WorkingRegion(0.0, 0.01, 0.99, 1.01)
    cov = build_covering(model, cert, region, GridSpec(nt=1, nr=1, nd=1), seed=0)
    # one grid cell per sign component; a query sees exactly one bump,
    # normalized to 1 on its support
    bands = cov.bands_at(0.005, [1.0])
    assert bands.theta.tolist() == [1.0]


def test_coverage_error_on_sparse_grid():
    model, cert = S3
    region = WorkingRegion(0.0, 1.0, 0.5, 2.0)
    with pytest.raises(CoverageError):
        build_covering(model, cert, region, GridSpec(nt=2, nr=2, nd=1), seed=0)


def test_k_boundary_values(s3_cover):
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    ts, xs = _region_samples(cov.region, 20, model.n, seed=2)
    for t, x in zip(ts, xs):
        assert np.all(fb.k(0.0, t, x) == 0.0)
        assert np.all(fb.k(1.0, t, x) == 0.0)


def test_k_rejects_bad_s(s3_cover):
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    with pytest.raises(ValueError):
        fb.k(1.5, 0.1, [1.0])


def test_plateau_identity(s3_cover):
    # k(s,t,x) = u_j on [T_{j-1}+2g/5, T_j-2g/5] whenever theta_j >= 2*eps*w
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    ts, xs = _region_samples(cov.region, 15, model.n, seed=3)
    hits = 0
    for t, x in zip(ts, xs):
        tc, xc = cov.clamp(t, x)
        bands = cov.bands_at(tc, xc)
        eps = fb.ramp_budget(t, x)
        w = eps * bands.weight
        hi = 0.0
        for j, theta in enumerate(bands.theta):
            lo, hi = hi, hi + float(theta)
            if theta < 2.0 * w:
                continue
            g = w  # saturated by the plateau condition
            for s in np.linspace(lo + 2 * g / 5, hi - 2 * g / 5, 7):
                val = fb.k(float(s), t, x)
                assert np.allclose(val, bands.u[j], atol=1e-12), (s, lo, hi)
            hits += 1
    assert hits > 0


def test_ramp_sandwich(s3_cover):
    # min(eps*w, theta/2) <= g <= min(eps*w, theta)
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    ts, xs = _region_samples(cov.region, 30, model.n, seed=4)
    for t, x in zip(ts, xs):
        tc, xc = cov.clamp(t, x)
        bands = cov.bands_at(tc, xc)
        eps = fb.ramp_budget(t, x)
        w = eps * bands.weight
        for theta in bands.theta:
            g = 0.5 * theta + 0.5 * (2 * w - theta) * smooth_step((theta - w) / w)
            assert min(w, theta / 2) - 1e-15 <= g <= min(w, theta) + 1e-15


def test_amplitude_bound(s3_cover):
    # max_s |k(s,t,x)| <= budget envelope, zero tolerance
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    ts, xs = _region_samples(cov.region, 15, model.n, seed=5)
    for t, x in zip(ts, xs):
        assert fb.max_abs_k(t, x, 512) <= b_tilde(model, cert, t, x)


def test_off_plateau_measure(s3_cover):
    # s-measure where k differs from every patch control is <= eps (+2 cells)
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    ts, xs = _region_samples(cov.region, 10, model.n, seed=6)
    n_grid = 1024
    for t, x in zip(ts, xs):
        tc, xc = cov.clamp(t, x)
        bands = cov.bands_at(tc, xc)
        eps = fb.ramp_budget(t, x)
        us = bands.u
        off = 0
        for s in np.linspace(0, 1, n_grid):
            val = fb.k(float(s), t, x)
            if not np.any(np.all(np.abs(us - val) <= 1e-12, axis=1)):
                off += 1
        assert off / n_grid <= eps + 2.0 / n_grid


def test_average_decrease_bound(s3_cover):
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    ts, xs = _region_samples(cov.region, 25, model.n, seed=7)
    rng = np.random.default_rng(8)
    for t, x in zip(ts, xs):
        pieces = int(rng.integers(1, 6))
        dpath = DisturbancePath.random(model.D, 0.0, 1.0, pieces, seed=int(rng.integers(1 << 30)))
        val = average_decrease(fb, model, cert, t, x, dpath)
        v = cert.V_at(t, np.asarray(x))
        assert val <= -0.5 * cert.rho(v) + 1e-6, (t, x, val, v)


def test_average_decrease_quadrature_agreement(s3_cover):
    # aligned Simpson against a much denser rule with the same piece alignment
    # (the ramps are far narrower than any fixed uniform grid)
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    t, x = 0.4, np.array([1.2])
    dpath = DisturbancePath.constant([0.0])
    val = average_decrease(fb, model, cert, t, x, dpath)
    knots = fb.band_knots(t, x)
    total = 0.0
    for a, c in zip(knots[:-1], knots[1:]):
        if c - a < 1e-15:
            continue
        ss = np.linspace(a, c, 801)
        vals = np.array([model.f_at(t, [0.0], x, fb.k(float(s), t, x))[0] for s in ss])
        total += np.trapezoid(vals, ss)
    brute = cert.dV_dt(t, x) + cert.dV_dx(t, x)[0] * total
    assert val == pytest.approx(brute, abs=1e-7)


def test_boundary_smoothness(s3_cover):
    model, cert, cov = s3_cover
    fb = SegmentFeedback(model, cert, cov)
    ts, xs = _region_samples(cov.region, 12, model.n, seed=9)
    for t, x in zip(ts, xs):
        rep = boundary_smoothness_check(fb, t, x)
        assert rep.boundary_max(1e-5) < 1e-8
        assert rep.interior_adapted < 1e-6
