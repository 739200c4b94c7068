"""Segment feedback on a virtual unit interval via a partition of unity.

A covering supplies patch centers with certified controls; the segment
feedback sweeps the active patches over s in [0, 1] with smooth ramps so
that its s-average decreases V while k(0) = k(1) = 0 with flat joins.

Two covering providers exist: the explicit grid covering built here, and the
lazy scaled-lattice patches in :mod:`lyapsyn.lattice` used by the per-band
feedback banks.  Both expose ``bands_at`` and share the evaluator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kfuncs import bump1d, smooth_step
from .minimax import (
    CertificateSearchError,
    MinimaxConfig,
    DEFAULT_CONFIG,
    b_tilde,
    lie_values,
    seed_from,
    select_control,
    u_candidates,
)
from .model import Certificate, SystemModel, DisturbancePath

__all__ = [
    "WorkingRegion",
    "GridSpec",
    "Covering",
    "CoverageError",
    "BandsView",
    "SegmentFeedback",
    "build_covering",
    "average_decrease",
    "boundary_smoothness_check",
    "SmoothnessReport",
]


class CoverageError(RuntimeError):
    """The patch grid leaves part of the region uncovered; increase covering density."""

    def __init__(self, witness):
        super().__init__(f"increase covering density: uncovered point {witness}")
        self.witness = witness


@dataclass(frozen=True)
class WorkingRegion:
    """Bounded (t-interval) x (norm annulus) working set, origin excluded."""

    t_lo: float
    t_hi: float
    x_lo: float
    x_hi: float

    def __post_init__(self):
        if not (self.t_hi > self.t_lo and self.x_hi > self.x_lo > 0):
            raise ValueError("degenerate working region")

    def clamp(self, t: float, x: np.ndarray) -> tuple:
        """Project onto the region: clip t, clip |x| along the ray through x."""
        x = np.asarray(x, dtype=float)
        r = float(np.linalg.norm(x))
        if r == 0.0:
            raise ValueError("segment feedback undefined at x = 0")
        rc = min(max(r, self.x_lo), self.x_hi)
        tc = min(max(float(t), self.t_lo), self.t_hi)
        return tc, x * (rc / r)

    def contains(self, t: float, x) -> bool:
        r = float(np.linalg.norm(np.asarray(x, dtype=float)))
        return self.t_lo <= t <= self.t_hi and self.x_lo <= r <= self.x_hi


@dataclass(frozen=True)
class GridSpec:
    """Covering density: time points x radial shells x directions."""

    nt: int = 8
    nr: int = 8
    nd: int = 8


@dataclass(frozen=True)
class BandsView:
    """Active patches at one point, in the covering's deterministic order.

    ``theta`` is the normalized partition (sums to 1); ``weight`` is the
    uniform plateau half-width budget shared by all patches, chosen so that
    the active weights always sum below 1/2.
    """

    theta: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    weight: float


# ---------------------------------------------------------------------------
# explicit grid covering


def _directions(n: int, count: int) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        ang = np.linspace(0.0, 2.0 * math.pi, count, endpoint=False)
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    rng = np.random.default_rng(77 + n)
    v = rng.standard_normal((count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class Covering:
    """Finite patch covering of a working region with certified controls.

    Every patch i carries a center, a control u_i bounded by the budget at
    the center, a taxicab radius delta_i with the decrease margin certified
    nonpositive on the ball, and a derivative envelope phi_i over its
    support.  Bumps are products of radial smooth kernels on |tau - t_i| and
    |y - x_i|, normalized by the partition sum at evaluation time.
    """

    model: SystemModel
    cert: Certificate
    region: WorkingRegion
    density: GridSpec
    centers_t: np.ndarray
    centers_x: np.ndarray
    controls: np.ndarray
    radii: np.ndarray      # certified taxicab radii delta_i
    supp_t: np.ndarray     # bump support half-widths, <= delta_i / 2
    supp_x: np.ndarray
    phis: np.ndarray
    weight: float
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.radii)

    def raw_bumps(self, t: float, x: np.ndarray) -> np.ndarray:
        dt = np.abs(t - self.centers_t) / self.supp_t
        dx = np.linalg.norm(x[None, :] - self.centers_x, axis=1) / self.supp_x
        vals = np.zeros(self.size)
        near = (dt < 1.0) & (dx < 1.0)
        for i in np.nonzero(near)[0]:
            vals[i] = bump1d(dt[i]) * bump1d(dx[i])
        return vals

    def bands_at(self, t: float, x) -> BandsView:
        tc, xc = self.region.clamp(t, np.asarray(x, dtype=float))
        raw = self.raw_bumps(tc, xc)
        total = float(np.sum(raw))
        if total <= 0.0:
            raise CoverageError((tc, tuple(xc)))
        idx = np.nonzero(raw > 0.0)[0]  # already in list order
        return BandsView(raw[idx] / total, self.controls[idx], self.phis[idx], self.weight)

    def clamp(self, t, x):
        return self.region.clamp(t, x)


def _phi_over_box(model, cert, t_i, x_i, half_t, half_x, u_cap, seed) -> float:
    """Envelope of the worst derivative over a patch support box, >= 1."""
    rng = np.random.default_rng(seed)
    pts_t = [t_i]
    pts_x = [x_i]
    for _ in range(24):
        pts_t.append(t_i + rng.uniform(-half_t, half_t))
        pts_x.append(x_i + rng.uniform(-half_x, half_x, x_i.size))
    best = -math.inf
    d_pts = model.D.points()
    for tt, xx in zip(pts_t, pts_x):
        budget = min(u_cap, b_tilde(model, cert, max(tt, 0.0), xx, grids=(8, 8, 8)))
        cands = u_candidates(model.U, budget, 16, 16)
        vals = lie_values(model, cert, tt, xx, cands, d_pts)
        best = max(best, float(np.max(vals)))
    return max(1.0, 1.1 * best)


def build_covering(
    model: SystemModel,
    cert: Certificate,
    region: WorkingRegion,
    density: GridSpec = GridSpec(),
    config: MinimaxConfig = DEFAULT_CONFIG,
    seed: int = 0,
) -> Covering:
    """Grid the region, certify a control and radius per center, verify coverage.

    Coverage is verified by seeded sampling: every sample must lie within
    taxicab distance delta_i/2 of some center.  A gap raises CoverageError
    with the witness point.
    """
    if density.nt > 1:
        ts = np.linspace(region.t_lo, region.t_hi, density.nt)
        h_t = (region.t_hi - region.t_lo) / (density.nt - 1)
    else:
        ts = np.array([0.5 * (region.t_lo + region.t_hi)])
        h_t = region.t_hi - region.t_lo
    if density.nr > 1:
        radii_grid = np.exp(np.linspace(math.log(region.x_lo), math.log(region.x_hi), density.nr))
    else:
        radii_grid = np.array([math.sqrt(region.x_lo * region.x_hi)])
    dirs = _directions(model.n, density.nd)
    n_dirs = len(dirs)

    if density.nr > 1:
        rad_steps = np.empty(density.nr)
        rad_steps[:-1] = np.diff(radii_grid)
        rad_steps[-1] = rad_steps[-2]
        rad_steps = np.maximum(rad_steps, np.concatenate([[rad_steps[0]], rad_steps[:-1]]))
    else:
        rad_steps = np.full(1, region.x_hi - region.x_lo)

    centers_t, centers_x, controls, deltas = [], [], [], []
    supp_t, supp_x = [], []
    for t_i in ts:
        for ir, r_i in enumerate(radii_grid):
            arc = 2.0 * math.pi * r_i / n_dirs if model.n > 1 else 0.0
            spacing_x = max(rad_steps[ir], arc)
            for d_i in dirs:
                x_i = r_i * d_i
                sel = select_control(model, cert, float(t_i), x_i, config)
                centers_t.append(float(t_i))
                centers_x.append(x_i)
                controls.append(sel.u_star)
                deltas.append(sel.delta)
                supp_t.append(min(sel.delta / 2.0, 1.1 * h_t))
                supp_x.append(min(sel.delta / 2.0, 1.5 * spacing_x))
    centers_t = np.asarray(centers_t)
    centers_x = np.asarray(centers_x)
    controls = np.asarray(controls)
    deltas = np.asarray(deltas)
    supp_t = np.asarray(supp_t)
    supp_x = np.asarray(supp_x)

    # coverage: every seeded sample must sit well inside some bump support
    rng = np.random.default_rng(seed_from(seed, region.t_lo, region.x_lo, 5))
    n_samp = 64 * density.nt
    samp_t = rng.uniform(region.t_lo, region.t_hi, n_samp)
    samp_r = np.exp(rng.uniform(math.log(region.x_lo), math.log(region.x_hi), n_samp))
    samp_d = rng.standard_normal((n_samp, model.n))
    samp_d /= np.linalg.norm(samp_d, axis=1, keepdims=True)
    samp_x = samp_r[:, None] * samp_d
    max_overlap = 1
    for tt, xx in zip(samp_t, samp_x):
        dt = np.abs(tt - centers_t)
        dx = np.linalg.norm(xx - centers_x, axis=1)
        if not np.any((dt <= supp_t / 2.0) & (dx <= supp_x / 2.0)):
            raise CoverageError((float(tt), tuple(xx)))
        max_overlap = max(max_overlap, int(np.sum((dt < supp_t) & (dx < supp_x))))

    bound = int(math.ceil(1.25 * max_overlap)) + 1
    weight = 1.0 / (4.0 * bound)

    phis = np.empty(len(deltas))
    for i in range(len(deltas)):
        phis[i] = _phi_over_box(
            model, cert, centers_t[i], centers_x[i],
            supp_t[i], supp_x[i], math.inf,
            seed_from(seed, centers_t[i], centers_x[i], 9),
        )

    return Covering(
        model, cert, region, density,
        centers_t, centers_x, controls, deltas, supp_t, supp_x, phis, weight, seed,
    )


# ---------------------------------------------------------------------------
# the segment feedback evaluator


@dataclass
class SegmentFeedback:
    """Evaluable k(s, t, x) over a covering provider.

    The provider supplies the active patches at a point; the evaluator turns
    them into consecutive s-bands with smooth rising/falling ramps around a
    plateau at the patch control.  Outside its region the provider clamps
    the query along rays.
    """

    model: SystemModel
    cert: Certificate
    provider: object  # Covering or lattice patch table

    def ramp_budget(self, t: float, x) -> float:
        """Fraction of [0,1] allowed off-plateau at (t, x) (the eps budget)."""
        tc, xc = self.provider.clamp(t, np.asarray(x, dtype=float))
        bands = self.provider.bands_at(tc, xc)
        return self._eps(tc, xc, bands)

    def _eps(self, tc, xc, bands: BandsView) -> float:
        rv = float(self.cert.rho(self.cert.V_at(max(tc, 0.0), xc)))
        phi_mix = float(bands.theta @ bands.phi)
        return rv / (8.0 * (rv + phi_mix))

    def k(self, s: float, t: float, x) -> np.ndarray:
        """The segment control at virtual time s in [0, 1]."""
        if not (0.0 <= s <= 1.0):
            raise ValueError(f"s={s} outside [0, 1]")
        m = self.model.m
        if s == 0.0 or s == 1.0:
            return np.zeros(m)
        x = np.asarray(x, dtype=float)
        tc, xc = self.provider.clamp(t, x)
        bands = self.provider.bands_at(tc, xc)
        eps = self._eps(tc, xc, bands)
        w = eps * bands.weight
        # locate the band containing s
        upper = np.cumsum(bands.theta)
        j = int(np.searchsorted(upper, s, side="left"))
        j = min(j, len(upper) - 1)
        t_hi = upper[j]
        t_lo = t_hi - bands.theta[j]
        theta = float(bands.theta[j])
        if theta <= 0.0 or w <= 0.0:
            return np.zeros(m)
        g = 0.5 * theta + 0.5 * (2.0 * w - theta) * smooth_step((theta - w) / w)
        if g <= 0.0:
            return np.zeros(m)
        if s <= t_lo + 0.5 * theta:
            arg = (s - t_lo - g / 5.0) / (g / 5.0)
        else:
            arg = (t_hi - g / 5.0 - s) / (g / 5.0)
        amp = (g / w) ** 2
        return bands.u[j] * (amp * smooth_step(arg))

    def profile(self, t: float, x, ss) -> np.ndarray:
        """k(s, t, x) for many s sharing one partition evaluation; (len(ss), m)."""
        x = np.asarray(x, dtype=float)
        tc, xc = self.provider.clamp(t, x)
        bands = self.provider.bands_at(tc, xc)
        eps = self._eps(tc, xc, bands)
        w = eps * bands.weight
        upper = np.cumsum(bands.theta)
        out = np.zeros((len(ss), self.model.m))
        if w <= 0.0:
            return out
        for idx, s in enumerate(np.asarray(ss, dtype=float)):
            if s <= 0.0 or s >= 1.0:
                continue
            j = min(int(np.searchsorted(upper, s, side="left")), len(upper) - 1)
            t_hi = upper[j]
            theta = float(bands.theta[j])
            t_lo = t_hi - theta
            if theta <= 0.0:
                continue
            g = 0.5 * theta + 0.5 * (2.0 * w - theta) * smooth_step((theta - w) / w)
            if g <= 0.0:
                continue
            if s <= t_lo + 0.5 * theta:
                arg = (s - t_lo - g / 5.0) / (g / 5.0)
            else:
                arg = (t_hi - g / 5.0 - s) / (g / 5.0)
            out[idx] = bands.u[j] * ((g / w) ** 2 * smooth_step(arg))
        return out

    def band_knots(self, t: float, x) -> np.ndarray:
        """s-points where the profile changes pieces (band edges and ramps)."""
        x = np.asarray(x, dtype=float)
        tc, xc = self.provider.clamp(t, x)
        bands = self.provider.bands_at(tc, xc)
        eps = self._eps(tc, xc, bands)
        w = eps * bands.weight
        knots = [0.0, 1.0]
        hi = 0.0
        for theta in bands.theta:
            lo, hi = hi, hi + float(theta)
            g = 0.5 * theta + 0.5 * (2.0 * w - theta) * smooth_step((theta - w) / w)
            knots += [lo, hi, lo + 0.5 * theta]
            if g > 0:
                knots += [lo + g / 5.0, lo + 2.0 * g / 5.0, hi - 2.0 * g / 5.0, hi - g / 5.0]
        ks = np.unique(np.clip(np.asarray(knots), 0.0, 1.0))
        return ks

    def max_abs_k(self, t: float, x, n_grid: int = 1024) -> float:
        ss = np.linspace(0.0, 1.0, n_grid)
        return max(float(np.linalg.norm(self.k(float(s), t, x))) for s in ss)

    def thresholds(self, t: float, x) -> np.ndarray:
        """Interior band thresholds T_j at (t, x)."""
        tc, xc = self.provider.clamp(t, np.asarray(x, dtype=float))
        bands = self.provider.bands_at(tc, xc)
        cum = np.cumsum(bands.theta)[:-1]
        return cum[(cum > 1e-12) & (cum < 1.0 - 1e-12)]


def average_decrease(
    fb: SegmentFeedback,
    model: SystemModel,
    cert: Certificate,
    t: float,
    x,
    dpath: DisturbancePath,
    min_panels: int = 256,
) -> float:
    """V_t + V_x . integral over s of f(t, d(s), x, k(s, t, x)).

    Composite Simpson with panels aligned to the profile's band knots and to
    the disturbance breakpoints, at least ``min_panels`` total.
    """
    x = np.asarray(x, dtype=float)
    t = float(t)
    knots = list(fb.band_knots(t, x))
    knots += [float(b) for b in dpath.breakpoints if 0.0 < b < 1.0]
    knots = np.unique(np.clip(np.asarray(knots + [0.0, 1.0]), 0.0, 1.0))

    pieces = []
    for a, c in zip(knots[:-1], knots[1:]):
        if c - a > 1e-15:
            pieces.append((a, c))
    total_len = sum(c - a for a, c in pieces)

    vt = cert.dV_dt(t, x)
    vx = cert.dV_dx(t, x)
    integral = np.zeros(model.n)
    for a, c in pieces:
        n_pan = max(2, int(math.ceil((c - a) / total_len * min_panels / 2.0)) * 2)
        ss = np.linspace(a, c, n_pan + 1)
        h = (c - a) / n_pan
        us = fb.profile(t, x, ss)
        ds = np.array([dpath.at(float(s)) for s in ss])
        if model.vectorized:
            xx = np.broadcast_to(x, (n_pan + 1, model.n))
            vals = np.asarray(model.f(t, ds, xx, us), dtype=float)
        else:
            vals = np.array([model.f_at(t, d, x, u) for d, u in zip(ds, us)])
        wgt = np.ones(n_pan + 1)
        wgt[1:-1:2] = 4.0
        wgt[2:-1:2] = 2.0
        integral += (h / 3.0) * np.tensordot(wgt, vals, axes=(0, 0))
    return float(vt + vx @ integral)


@dataclass(frozen=True)
class SmoothnessReport:
    """Finite-difference partials of k at the segment boundaries.

    ``boundary`` holds the max |partial| over s in {0, 1} per difference
    step; ``interior`` the same at internal band thresholds, measured both
    at the stated steps and at a step adapted to the local ramp width (the
    profile is flat on strips whose width scales with the ramp budget, so
    fixed steps can overshoot them).
    """

    steps: tuple
    boundary: tuple
    interior: tuple
    interior_adapted: float
    n_thresholds: int

    def boundary_max(self, step: float) -> float:
        return self.boundary[self.steps.index(step)]


def boundary_smoothness_check(
    fb: SegmentFeedback, t: float, x, steps: tuple = (1e-4, 1e-5)
) -> SmoothnessReport:
    x = np.asarray(x, dtype=float)
    t = float(t)

    def partials_at(s: float, step: float) -> float:
        worst = 0.0
        lo, hi = max(0.0, s - step), min(1.0, s + step)
        worst = max(worst, float(np.max(np.abs(fb.k(hi, t, x) - fb.k(lo, t, x)))) / (hi - lo))
        worst = max(
            worst,
            float(np.max(np.abs(fb.k(s, t + step, x) - fb.k(s, t - step, x)))) / (2 * step),
        )
        for ax in range(x.size):
            e = np.zeros_like(x)
            e[ax] = step
            worst = max(
                worst, float(np.max(np.abs(fb.k(s, t, x + e) - fb.k(s, t, x - e)))) / (2 * step)
            )
        return worst

    boundary = tuple(max(partials_at(0.0, h), partials_at(1.0, h)) for h in steps)

    thr = fb.thresholds(t, x)
    interior = tuple(max((partials_at(float(s), h) for s in thr), default=0.0) for h in steps)

    # adapted probe per threshold: the profile is exactly flat on strips of
    # width g/5 beside each threshold, but the thresholds drift under t/x
    # perturbations; shrink the step until the drift stays inside the strip
    eps = fb.ramp_budget(t, x)
    tc, xc = fb.provider.clamp(t, x)
    bands = fb.provider.bands_at(tc, xc)
    w = eps * bands.weight
    gs = [
        0.5 * th + 0.5 * (2.0 * w - th) * smooth_step((th - w) / w)
        for th in bands.theta
    ]
    cums = np.cumsum(bands.theta)
    adapted = 0.0
    for j in range(len(gs) - 1):
        s_j = float(cums[j])
        if not (1e-12 < s_j < 1.0 - 1e-12):
            continue
        strip = min(gs[j], gs[j + 1]) / 5.0
        if strip < 1e-250:
            continue  # amplitude-suppressed fringe band, k vanishes there
        h = strip / 4.0
        for _ in range(40):
            drift = 0.0
            probes = [(h, None), (-h, None)]
            probes += [(None, (ax, sg * h)) for ax in range(x.size) for sg in (1.0, -1.0)]
            for dt, dx in probes:
                tt = t + (dt or 0.0)
                xx = x.copy()
                if dx is not None:
                    xx[dx[0]] += dx[1]
                tcc, xcc = fb.provider.clamp(tt, xx)
                cum2 = np.cumsum(fb.provider.bands_at(tcc, xcc).theta)
                edges = np.concatenate([[0.0], cum2])
                drift = max(drift, float(np.min(np.abs(edges - s_j))))
            if drift <= strip / 4.0:
                break
            h /= 4.0
        adapted = max(adapted, partials_at(s_j, h))

    return SmoothnessReport(steps, boundary, interior, adapted, len(thr))
