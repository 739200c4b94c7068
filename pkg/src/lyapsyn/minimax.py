"""Worst-case decrease certificates and pointwise control selection.

Everything here is a pure function of immutable inputs.  Randomized
certification (the ball search in :func:`select_control`) derives its seed
from the query point, so repeated calls agree bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .model import Certificate, SystemModel

__all__ = [
    "MinimaxConfig",
    "ControlSelection",
    "NumericDomainError",
    "CertificateSearchError",
    "worst_derivative",
    "psi",
    "select_control",
    "b_tilde",
    "phi_bound",
    "epsilon_fn",
    "u_candidates",
    "lie_values",
    "seed_from",
]


class NumericDomainError(ArithmeticError):
    """A V or f evaluation produced a non-finite value; carries the point."""

    def __init__(self, msg, point):
        super().__init__(f"{msg} at {point}")
        self.point = point


class CertificateSearchError(RuntimeError):
    """The decrease certificate could not be verified at a point.

    Signals that the user's certificate (or the search grids) are inadequate
    near ``point``; ``best_margin`` is the least margin value found.
    """

    def __init__(self, point, best_margin):
        super().__init__(
            f"certificate not verifiable at {point}: best margin {best_margin:.3e}"
        )
        self.point = point
        self.best_margin = best_margin


@dataclass(frozen=True)
class MinimaxConfig:
    u_radii: int = 32
    u_dirs: int = 64
    ball_samples: int = 64
    kappa_slack: float = 0.125
    max_halvings: int = 60


DEFAULT_CONFIG = MinimaxConfig()


def seed_from(*vals) -> int:
    """Stable 63-bit seed derived from the bit patterns of float arguments."""
    h = hashlib.blake2b(digest_size=8)
    for v in vals:
        if isinstance(v, (np.ndarray, list, tuple)):
            for w in np.asarray(v, dtype=float).ravel():
                h.update(struct.pack("<d", float(w)))
        else:
            h.update(struct.pack("<d", float(v)))
    return int.from_bytes(h.digest(), "little") & ((1 << 63) - 1)


def lie_values(model: SystemModel, cert: Certificate, t: float, x, U_batch, d_pts) -> np.ndarray:
    """V_t + V_x . f(t, d, x, u) for a control batch against all d points.

    Returns shape (len(U_batch), len(d_pts)).  ``t`` is clamped to 0 from
    below, matching the convention that extends the margin function to
    negative times by freezing it at zero.
    """
    tc = max(float(t), 0.0)
    x = np.asarray(x, dtype=float)
    U_batch = np.atleast_2d(np.asarray(U_batch, dtype=float))
    d_pts = np.atleast_2d(np.asarray(d_pts, dtype=float))
    vt = cert.dV_dt(tc, x)
    vx = cert.dV_dx(tc, x)
    nu, nd = len(U_batch), len(d_pts)
    if model.vectorized:
        du = U_batch[:, None, :]
        dd = np.broadcast_to(d_pts[None, :, :], (nu, nd, d_pts.shape[1]))
        xx = np.broadcast_to(x, (nu, nd, x.size))
        fx = np.asarray(model.f(tc, dd, xx, np.broadcast_to(du, (nu, nd, du.shape[-1]))), dtype=float)
        vals = vt + np.tensordot(fx, vx, axes=([2], [0]))
    else:
        vals = np.empty((nu, nd))
        for i, u in enumerate(U_batch):
            for j, d in enumerate(d_pts):
                vals[i, j] = vt + float(vx @ model.f_at(tc, d, x, u))
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        raise NumericDomainError(
            "non-finite derivative value", (tc, tuple(x), tuple(U_batch[bad[0]]), tuple(d_pts[bad[1]]))
        )
    return vals


def worst_derivative(model: SystemModel, cert: Certificate, t: float, x, u) -> float:
    """max over the D discretization of V_t + V_x . f(t, d, x, u)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    vals = lie_values(model, cert, t, x, u[None, :], model.D.points())
    return float(np.max(vals[0]))


def psi(model: SystemModel, cert: Certificate, t: float, x, u) -> float:
    """Decrease margin: worst_derivative + (3/4) rho(V); frozen at t=0 for t<0."""
    tc = max(float(t), 0.0)
    v = cert.V_at(tc, x)
    return worst_derivative(model, cert, tc, x, u) + 0.75 * float(cert.rho(v))


def psi_batch(model, cert, t, x, U_batch) -> np.ndarray:
    tc = max(float(t), 0.0)
    v = cert.V_at(tc, x)
    vals = lie_values(model, cert, tc, x, U_batch, model.D.points())
    return np.max(vals, axis=1) + 0.75 * float(cert.rho(v))


def u_candidates(cone, budget: float, n_radii: int = 32, max_dirs: int = 64) -> np.ndarray:
    """Deterministic control candidates: log radius ladder times a direction grid.

    Always includes u = 0.  Magnitudes are capped by the budget and by the
    cone geometry.
    """
    dirs = cone.directions(max_dirs)
    if budget <= 0:
        return np.zeros((1, dirs.shape[1]))
    radii = budget * np.logspace(-5, 0, n_radii)
    cands = [np.zeros((1, dirs.shape[1]))]
    for d in dirs:
        rmax = min(budget, cone.max_radius(d))
        rr = radii[radii <= rmax * (1 + 1e-12)]
        if rr.size:
            cands.append(rr[:, None] * d[None, :])
    return np.concatenate(cands, axis=0)


@dataclass(frozen=True)
class ControlSelection:
    """A pointwise stabilizing control with its certified robustness radius.

    The margin function stays nonpositive on the sampled taxicab ball of
    radius ``delta`` around the query point.
    """

    u_star: np.ndarray
    delta: float
    margin: float


def _l1_ball_samples(t: float, x: np.ndarray, delta: float, count: int, seed: int) -> tuple:
    """Deterministic points with |dt| + |dy| < delta, axis extremes included."""
    n = x.size
    dim = 1 + n
    pts_t = []
    pts_x = []
    # axis extremes catch one-dimensional worst cases cheaply
    for ax in range(dim):
        for sgn in (1.0, -1.0):
            dv = np.zeros(dim)
            dv[ax] = sgn * 0.999 * delta
            pts_t.append(t + dv[0])
            pts_x.append(x + dv[1:])
    rng = np.random.default_rng(seed)
    raw = rng.standard_exponential((count, dim)) * rng.choice([-1.0, 1.0], size=(count, dim))
    l1 = np.sum(np.abs(raw), axis=1, keepdims=True)
    frac = rng.uniform(0, 1, (count, 1)) ** (1.0 / dim)
    pts = raw / l1 * delta * frac * 0.999
    for p in pts:
        pts_t.append(t + p[0])
        pts_x.append(x + p[1:])
    return np.asarray(pts_t), np.asarray(pts_x)


def select_control(
    model: SystemModel,
    cert: Certificate,
    t: float,
    x,
    config: MinimaxConfig = DEFAULT_CONFIG,
) -> ControlSelection:
    """Find u with |u| <= b(t,x) whose margin is certifiably negative nearby.

    The control is the margin minimizer over the deterministic candidate
    grid (ties: first in scan order).  The radius comes from geometric
    halving, accepting once all Monte-Carlo ball samples keep the margin
    below -rho(V)/16; the strictly negative center margin (-rho(V)/8
    required) makes the search well-posed.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    nx = float(np.linalg.norm(x))
    if nx == 0.0:
        raise ValueError("select_control requires x != 0")
    tc = max(float(t), 0.0)
    budget = float(cert.b(tc, x))
    cands = u_candidates(model.U, budget, config.u_radii, config.u_dirs)
    margins = psi_batch(model, cert, t, x, cands)
    best = int(np.argmin(margins))
    u_star = cands[best]
    margin = float(margins[best])
    v = cert.V_at(tc, x)
    need = -config.kappa_slack * float(cert.rho(v))
    if margin > need:
        raise CertificateSearchError((float(t), tuple(x)), margin)

    ball_need = need / 2.0
    delta = min(1.0, nx / 2.0)
    seed = seed_from(t, x, 101)
    for _ in range(config.max_halvings):
        ts, xs = _l1_ball_samples(float(t), x, delta, config.ball_samples, seed)
        worst = -math.inf
        for tt, xx in zip(ts, xs):
            worst = max(worst, psi(model, cert, tt, xx, u_star))
            if worst > ball_need:
                break
        if worst <= ball_need:
            return ControlSelection(u_star, float(delta), margin)
        delta *= 0.5
    raise CertificateSearchError((float(t), tuple(x)), margin)


def _sphere_dirs(n: int, count: int) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        ang = np.linspace(0, 2 * math.pi, count, endpoint=False)
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    rng = np.random.default_rng(443 + n)
    v = rng.standard_normal((count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def b_tilde(
    model: SystemModel,
    cert: Certificate,
    t: float,
    x,
    grids: tuple = (16, 16, 16),
) -> float:
    """Budget envelope: max of b over the 2/3..2 norm annulus and [0, t+1].

    Grid default 16 radial x 16 directions x 16 time points; radial and time
    grids include their endpoints so monotone budgets are maxed exactly.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    nx = float(np.linalg.norm(x))
    if nx == 0.0:
        return 0.0
    n_rad, n_dir, n_time = grids
    radii = np.linspace(2.0 * nx / 3.0, 2.0 * nx, n_rad)
    dirs = _sphere_dirs(model.n, n_dir)
    taus = np.linspace(0.0, max(float(t), 0.0) + 1.0, n_time)
    best = -math.inf
    for tau in taus:
        for r in radii:
            ys = r * dirs
            for y in ys:
                best = max(best, float(cert.b(float(tau), y)))
    return best


def phi_bound(model: SystemModel, cert: Certificate, t: float, x) -> float:
    """Upper envelope for the worst derivative over the budget ball, >= 1.

    10 percent margin over the sampled grid max, lower-clamped to the
    codomain [1, inf).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    bt = b_tilde(model, cert, t, x)
    cands = u_candidates(model.U, bt, DEFAULT_CONFIG.u_radii, DEFAULT_CONFIG.u_dirs)
    vals = lie_values(model, cert, t, x, cands, model.D.points())
    return max(1.0, 1.1 * float(np.max(vals)))


def epsilon_fn(model: SystemModel, cert: Certificate, t: float, x) -> float:
    """Ramp-measure budget: rho(V)/(8 (rho(V) + phi)), strictly inside (0,1)."""
    tc = max(float(t), 0.0)
    rv = float(cert.rho(cert.V_at(tc, x)))
    ph = phi_bound(model, cert, t, x)
    return rv / (8.0 * (rv + ph))
