import math

import numpy as np
import pytest

from lyapsyn.minimax import (
    CertificateSearchError,
    b_tilde,
    epsilon_fn,
    phi_bound,
    psi,
    select_control,
    u_candidates,
    worst_derivative,
)
from lyapsyn.model import builtin_system

S1 = builtin_system("S1_linear_remark24")
S2 = builtin_system("S2_cubic_example211")
S3 = builtin_system("S3_scalar_integrator")


def test_worst_derivative_s1_hand_values():
    model, cert = S1
    # V_t = 0 at x1 = 0; V_x.f = x2*u = -1
    assert worst_derivative(model, cert, 0.0, [0.0, 1.0], [-1.0]) == pytest.approx(-1.0)
    # V_t = -2 e^0 x1^2 = -2, V_x.f = e^0 x1^2 = 1
    assert worst_derivative(model, cert, 0.0, [1.0, 0.0], [0.0]) == pytest.approx(-1.0)


def test_worst_derivative_at_origin_is_zero():
    for model, cert in (S1, S2, S3):
        x0 = np.zeros(model.n)
        assert worst_derivative(model, cert, 0.3, x0, np.zeros(model.m)) == pytest.approx(0.0, abs=1e-9)


def test_worst_derivative_maxes_over_disturbance():
    model, cert = S2
    # V_x.f = x(dx + u^3); at x=1, u=0 worst d is +1
    assert worst_derivative(model, cert, 0.0, [1.0], [0.0]) == pytest.approx(1.0)


def test_psi_s3_hand_value():
    model, cert = S3
    # x*u + (3/4) rho(1/2) = -1 + 3/8
    assert psi(model, cert, 0.0, [1.0], [-1.0]) == pytest.approx(-0.625)


def test_psi_frozen_below_zero_time():
    model, cert = S1
    x = [0.7, -0.3]
    u = [0.2]
    assert psi(model, cert, -0.5, x, u) == pytest.approx(psi(model, cert, 0.0, x, u))


def test_psi_zero_at_origin():
    model, cert = S1
    assert psi(model, cert, 2.0, [0.0, 0.0], [0.0]) == pytest.approx(0.0, abs=1e-9)


def test_psi_identity_with_worst_derivative():
    model, cert = S1
    rng = np.random.default_rng(5)
    for _ in range(50):
        t = rng.uniform(0, 5)
        x = rng.uniform(-2, 2, 2)
        u = rng.uniform(-2, 2, 1)
        expect = worst_derivative(model, cert, t, x, u) + 0.75 * cert.rho(cert.V_at(t, x))
        assert psi(model, cert, t, x, u) == pytest.approx(expect, rel=1e-12)


def test_u_candidates_include_zero_and_obey_budget():
    from lyapsyn.model import FullSpace

    cands = u_candidates(FullSpace(1), 2.0)
    assert np.any(np.all(cands == 0.0, axis=1))
    assert np.max(np.abs(cands)) <= 2.0 + 1e-12


def _dense_scan_margin(model, cert, t, x, n=10001):
    budget = float(cert.b(max(t, 0.0), np.atleast_1d(x)))
    grid = np.linspace(-budget, budget, n)
    best = math.inf
    for u in grid:
        best = min(best, psi(model, cert, t, x, [u]))
    return best


def test_select_control_s3():
    model, cert = S3
    sel = select_control(model, cert, 0.0, [1.0])
    v = cert.V_at(0.0, [1.0])
    assert sel.margin <= -cert.rho(v) / 8.0
    assert sel.delta > 0.0
    assert abs(sel.u_star[0]) <= cert.b(0.0, np.array([1.0])) + 1e-12
    # margin matches a dense scan
    assert sel.margin == pytest.approx(_dense_scan_margin(model, cert, 0.0, [1.0]), abs=1e-3)


def test_select_control_s1_direction():
    model, cert = S1
    sel = select_control(model, cert, 0.0, [0.0, 1.0])
    assert sel.margin < 0.0
    assert sel.u_star[0] < 0.0  # pushes against x2


def test_select_control_s2_cuberoot_scale():
    model, cert = S2
    sel = select_control(model, cert, 0.0, [1.0])
    assert sel.margin <= -cert.rho(cert.V_at(0.0, [1.0])) / 8.0
    assert abs(sel.u_star[0]) <= 2.0 + 1e-12


def test_select_control_ball_retest_fresh_seed():
    # the certified ball must hold under a fresh 256-sample retest
    from lyapsyn.minimax import _l1_ball_samples

    rng = np.random.default_rng(11)
    for model, cert in (S1, S3):
        for _ in range(8):
            t = rng.uniform(0, 2)
            x = rng.uniform(0.5, 2.0, model.n) * rng.choice([-1, 1], model.n)
            sel = select_control(model, cert, t, x)
            ts, xs = _l1_ball_samples(t, np.asarray(x, float), sel.delta, 256, seed=987654)
            worst = max(psi(model, cert, tt, xx, sel.u_star) for tt, xx in zip(ts, xs))
            assert worst <= 0.0


def test_select_control_rejects_origin():
    model, cert = S3
    with pytest.raises(ValueError):
        select_control(model, cert, 0.0, [0.0])


def test_b_tilde_values():
    model3, cert3 = S3
    # b = 2|x|: max over |y| in [2/3, 2] is 4
    assert b_tilde(model3, cert3, 0.0, [1.0]) == pytest.approx(4.0)
    model2, cert2 = S2
    assert b_tilde(model2, cert2, 3.0, [1.0]) == pytest.approx(2.0)  # constant budget
    model1, cert1 = S1
    assert b_tilde(model1, cert1, 1.0, [1.0, 0.0]) == pytest.approx(2.0)


def test_b_tilde_dominates_b_at_own_point():
    for model, cert in (S1, S2, S3):
        rng = np.random.default_rng(3)
        for _ in range(20):
            t = rng.uniform(0, 4)
            x = rng.uniform(0.3, 2.0, model.n) * rng.choice([-1, 1], model.n)
            assert b_tilde(model, cert, t, x) >= float(cert.b(t, np.asarray(x))) - 1e-12


def test_phi_bound_values():
    model3, cert3 = S3
    # max over |u| <= 4 of x*u is 4, times 1.1
    assert phi_bound(model3, cert3, 0.0, [1.0]) == pytest.approx(4.4, rel=1e-6)
    model1, cert1 = S1
    # all derivative values <= 0 at (0, (1,0)): clamped to 1
    assert phi_bound(model1, cert1, 0.0, [1.0, 0.0]) == pytest.approx(1.0)


def test_epsilon_fn_formula_and_bound():
    model1, cert1 = S1
    # at x=(sqrt(2),0), t=0: V=1, rho(V)=1 and phi clamps to 1 -> 1/16
    x = [math.sqrt(2.0), 0.0]
    assert epsilon_fn(model1, cert1, 0.0, x) == pytest.approx(1.0 / 16.0, rel=1e-9)
    # generic bound 0 < eps <= rho/(4(rho+phi))
    rng = np.random.default_rng(8)
    for model, cert in (S1, S3):
        for _ in range(20):
            t = rng.uniform(0, 3)
            x = rng.uniform(0.3, 2.0, model.n) * rng.choice([-1, 1], model.n)
            eps = epsilon_fn(model, cert, t, x)
            rv = cert.rho(cert.V_at(t, np.asarray(x)))
            ph = phi_bound(model, cert, t, x)
            assert 0.0 < eps <= rv / (4.0 * (rv + ph)) + 1e-15


def test_epsilon_fn_vanishes_with_rho():
    model, cert = S3
    e_small = epsilon_fn(model, cert, 0.0, [1e-6])
    assert 0.0 < e_small < 1e-10


def test_epsilon_fn_arithmetic_oracle():
    # rho(V)=3, phi=1 -> 3/32 by direct formula arithmetic
    rv, ph = 3.0, 1.0
    assert rv / (8 * (rv + ph)) == pytest.approx(3.0 / 32.0)
