"""Interleaving of two staggered level schedules and the certified decrease.

Stall points of one schedule (where its blend gates the feedback off near a
band edge) sit mid-band for the half-shifted schedule, so alternating the
two per unit time interval yields a strict two-step decrease, quantified by
a piecewise-linear positive-definite function of the starting value.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .model import Certificate, SystemModel
from .scheduler import (
    BandCheck,
    BankConfig,
    FeedbackBank,
    LevelSchedule,
    mu_of_band,
)

__all__ = ["InterleavePair", "make_pair", "k_tilde", "rho_tilde", "check_two_step_decrease", "rho_tilde_table"]


@dataclass(frozen=True)
class InterleavePair:
    """Primary and half-shifted schedules with their decrease constants.

    gamma[i] is the certified two-step decrease available while the start
    value sits in band i; mu/mu_prime are the per-band unit-interval decrease
    rates of the two schedules.
    """

    sched: LevelSchedule
    sched_shift: LevelSchedule
    mu: tuple
    mu_prime: tuple
    gamma: tuple

    def _gi(self, i: int) -> float:
        return self.gamma[i - (self.sched.i_min - 1)]

    def gamma_at(self, i: int) -> float:
        lo = self.sched.i_min - 1
        hi = lo + len(self.gamma) - 1
        return self._gi(min(max(i, lo), hi))


def make_pair(model: SystemModel, cert: Certificate, window: Tuple[int, int]) -> InterleavePair:
    """Build the (r, a) / (r', a') pair with amplitudes at half their caps.

    r_i = 2^i; r'_i is the band midpoint (r_i + r_{i+1})/2.  Each amplitude
    is half the tightest of its admissibility bounds, so every required
    inequality holds with at least 50 percent margin.
    """
    i_min, i_max = int(window[0]), int(window[1])
    if i_max < i_min:
        raise ValueError("empty schedule window")
    idx = np.arange(i_min - 4, i_max + 6)  # generous margin for neighbor access
    r_all = {int(i): 2.0 ** float(i) for i in idx}
    rp_all = {int(i): 0.5 * (r_all[int(i)] + r_all[int(i) + 1]) for i in idx[:-1]}

    def min_rho(lo: float, hi: float) -> float:
        ss = np.linspace(lo, hi, 257)
        return float(min(cert.rho(float(s)) for s in ss))

    mu = {i: 0.25 * min_rho(r_all[i - 1], r_all[i]) for i in range(i_min - 3, i_max + 5)}
    mu_p = {i: 0.25 * min_rho(rp_all[i - 1], rp_all[i]) for i in range(i_min - 3, i_max + 5)}

    a_vals = {}
    ap_vals = {}
    for i in range(i_min - 3, i_max + 4):
        bounds = [
            0.4 * r_all[i - 1],                      # (5/2) a_i <= r_{i-1}
            (r_all[i + 1] - r_all[i]) / 16.0,        # split of a_i + a'_i <= gap/8
            (r_all[i] - r_all[i - 1]) / 16.0,        # split of a_i + a'_{i-1} <= gap/8
            mu_p[i] / 8.0,
        ]
        bounds_p = [
            0.4 * rp_all[i - 1],
            (rp_all[i + 1] - rp_all[i]) / 16.0,
            (rp_all[i] - rp_all[i - 1]) / 16.0,
            mu[i + 1] / 8.0,
        ]
        if min(bounds) <= 0 or min(bounds_p) <= 0:
            raise ValueError(f"amplitude bound nonpositive in band {i} (decrease rate vanishes)")
        a_vals[i] = 0.5 * min(bounds)
        ap_vals[i] = 0.5 * min(bounds_p)

    rng = range(i_min - 3, i_max + 4)
    sched = LevelSchedule(i_min, i_max, tuple(r_all[i] for i in rng), tuple(a_vals[i] for i in rng), tag="pow2_half")
    sched_p = LevelSchedule(i_min, i_max, tuple(rp_all[i] for i in rng), tuple(ap_vals[i] for i in rng), tag="pow2_half_shift")

    # re-verify the five amplitude families after construction
    for i in range(i_min - 2, i_max + 3):
        assert 2.5 * a_vals[i] <= r_all[i - 1] + 1e-15
        assert 2.5 * ap_vals[i] <= rp_all[i - 1] + 1e-15
        assert r_all[i] + 2 * a_vals[i] < r_all[i + 1] - 2 * a_vals[i + 1]
        assert rp_all[i] + 2 * ap_vals[i] < rp_all[i + 1] - 2 * ap_vals[i + 1]
        assert a_vals[i] + ap_vals[i] <= (r_all[i + 1] - r_all[i]) / 8.0 + 1e-15
        assert a_vals[i] + ap_vals[i - 1] <= (r_all[i] - r_all[i - 1]) / 8.0 + 1e-15
        assert a_vals[i] <= mu_p[i] / 8.0 + 1e-15
        assert ap_vals[i] <= mu[i + 1] / 8.0 + 1e-15

    gammas = []
    for i in range(i_min - 1, i_max + 3):
        gammas.append(0.25 * min(r_all[i - 1] - r_all[i - 2], 2 * mu_p[i - 1], 2 * mu[i]))
    mu_t = tuple(mu[i] for i in range(i_min - 1, i_max + 3))
    mup_t = tuple(mu_p[i] for i in range(i_min - 1, i_max + 3))
    return InterleavePair(sched, sched_p, mu_t, mup_t, tuple(gammas))


@dataclass
class InterleavedFeedback:
    """Parity dispatch between the two banks of an interleave pair."""

    pair: InterleavePair
    bank: FeedbackBank
    bank_shift: FeedbackBank

    def active_bank(self, t: float) -> FeedbackBank:
        return self.bank if int(math.floor(t)) % 2 == 0 else self.bank_shift

    def u(self, t: float, x) -> np.ndarray:
        return self.active_bank(t).k_ra(t, x)


def k_tilde(pair: InterleavePair, bank: FeedbackBank, bank_shift: FeedbackBank,
            t: float, x) -> np.ndarray:
    """Primary-schedule feedback on even unit intervals, shifted on odd."""
    return InterleavedFeedback(pair, bank, bank_shift).u(t, x)


def rho_tilde(pair: InterleavePair, s: float) -> float:
    """Certified two-step decrease at starting value s, capped by s itself.

    Piecewise-linear between min(gamma_i, gamma_{i+1}) at the band landmarks
    r_i - 2 a_i; outside the window the nearest band's constant extends.
    """
    if s <= 0.0:
        return 0.0
    sched = pair.sched
    lo_i, hi_i = sched.i_min - 1, sched.i_max + 1

    def edge(i: int) -> float:
        return sched.r(i) - 2 * sched.a(i)

    if s <= edge(lo_i):
        bar = min(pair.gamma_at(lo_i), pair.gamma_at(lo_i + 1))
        return min(bar, s)
    if s > edge(hi_i):
        bar = min(pair.gamma_at(hi_i), pair.gamma_at(hi_i + 1))
        return min(bar, s)
    i = lo_i + 1
    while edge(i) < s:
        i += 1
    lo_e, hi_e = edge(i - 1), edge(i)
    y0 = min(pair.gamma_at(i - 1), pair.gamma_at(i))
    y1 = min(pair.gamma_at(i), pair.gamma_at(i + 1))
    bar = y0 + (y1 - y0) * (s - lo_e) / (hi_e - lo_e)
    return min(bar, s)


def check_two_step_decrease(traj, pair: InterleavePair, rtol: float = 1e-9,
                            slack: float = 1e-6) -> BandCheck:
    """V(2j+2) <= V(2j) - rho_tilde(V(2j)) along an even-start trajectory."""
    ts = np.asarray(traj.t)
    vs = np.asarray(traj.V)
    t0 = float(ts[0])
    j0 = int(round(t0 / 2.0))
    if abs(t0 - 2 * j0) > 1e-9:
        raise ValueError("two-step check needs an even integer start time")
    worst = math.inf
    wit = None
    t_jump = 2 * j0
    while t_jump + 2 <= ts[-1] + 1e-9:
        i0 = int(np.argmin(np.abs(ts - t_jump)))
        i1 = int(np.argmin(np.abs(ts - (t_jump + 2))))
        if abs(ts[i0] - t_jump) > 1e-9 or abs(ts[i1] - (t_jump + 2)) > 1e-9:
            break
        v0, v1 = float(vs[i0]), float(vs[i1])
        bound = v0 - rho_tilde(pair, v0)
        margin = (bound - v1) / max(1.0, bound) + rtol + slack
        if margin < worst:
            worst, wit = margin, (float(t_jump), v0, v1)
        t_jump += 2
    if wit is None:
        return BandCheck(True, math.inf, None, note="no full two-step window")
    return BandCheck(worst >= 0.0, worst, wit)


def rho_tilde_table(pair: InterleavePair, n: int = 200) -> str:
    """Sampled (s, rho_tilde(s)) table in plain text, for plotting."""
    sched = pair.sched
    lo = sched.r(sched.i_min) * 0.5
    hi = sched.r(sched.i_max)
    out = io.StringIO()
    out.write("s rho_tilde\n")
    for s in np.exp(np.linspace(math.log(lo), math.log(hi), n)):
        out.write(f"{s:.9g} {rho_tilde(pair, float(s)):.9g}\n")
    return out.getvalue()
