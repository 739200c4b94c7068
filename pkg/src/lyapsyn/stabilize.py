"""Final feedback laws and the closed-loop vector field.

Two assembled laws: the uniform one (requires the budget cap data and a
time-independent upper sandwich weight) equals the interleaved feedback away
from the origin; the deadzone one multiplies it by a gate that switches off
inside the shrinking region V <= exp(-t), trading uniformity in the initial
time for dispensing with the budget-cap hypothesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .interleave import InterleavePair, InterleavedFeedback
from .kfuncs import smooth_step
from .model import Certificate, SystemModel
from .scheduler import FeedbackBank

__all__ = [
    "FeedbackLaw",
    "feedback_uniform",
    "feedback_deadzone",
    "raw_scheduler_law",
    "raw_interleave_law",
    "closed_loop_field",
    "ClosedLoopField",
    "deadzone_exit_time",
    "ORIGIN_SNAP",
]

ORIGIN_SNAP = 1e-12

LAW_KINDS = ("uniform", "deadzone", "raw_segment", "raw_scheduler", "raw_interleave")


@dataclass
class FeedbackLaw:
    """An evaluable u = K(t, x) with K(t, 0) = 0, tagged by its construction."""

    kind: str
    model: SystemModel
    cert: Certificate
    pair: Optional[InterleavePair] = None
    bank: Optional[FeedbackBank] = None
    bank_shift: Optional[FeedbackBank] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise ValueError(f"unknown law kind {self.kind!r}")

    def _k_interleaved(self, t: float, x) -> np.ndarray:
        return InterleavedFeedback(self.pair, self.bank, self.bank_shift).u(t, x)

    def u(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if float(np.linalg.norm(x)) < ORIGIN_SNAP:
            return np.zeros(self.model.m)
        if self.kind == "raw_scheduler":
            return self.bank.k_ra(t, x)
        if self.kind in ("raw_interleave", "uniform"):
            return self._k_interleaved(t, x)
        if self.kind == "deadzone":
            gate = math.exp(-float(t))
            v = self.cert.V_at(max(float(t), 0.0), x)
            if v <= gate:
                return np.zeros(self.model.m)
            return smooth_step((v - gate) / gate) * self._k_interleaved(t, x)
        raise ValueError(self.kind)

    def subgrid(self, t: float, x) -> int:
        """Subintervals per unit time of the active band (1 where gated off)."""
        if self.bank is None:
            return 1
        x = np.asarray(x, dtype=float)
        if float(np.linalg.norm(x)) < ORIGIN_SNAP:
            return 1
        if self.kind == "deadzone":
            v = self.cert.V_at(max(float(t), 0.0), x)
            if v <= math.exp(-float(t)):
                return 1
        if self.kind == "raw_scheduler":
            bank = self.bank
        else:
            bank = InterleavedFeedback(self.pair, self.bank, self.bank_shift).active_bank(t)
        i, _ = bank.band_at(t, x)
        j = int(math.floor(t))
        _, data = bank.ensure(i, j)
        return data.N


def _check_uniform_preconditions(model, cert, n_samples=128, seed=2):
    if cert.small_control is None:
        raise ValueError(
            "uniform law needs the budget-cap (small-control) data; use the deadzone law"
        )
    rng = np.random.default_rng(seed)
    a3, gamma = cert.small_control
    for _ in range(n_samples):
        t = float(rng.uniform(0, 20))
        if abs(cert.beta(t) - 1.0) > 1e-12:
            raise ValueError("uniform law needs beta == 1; use the deadzone law")
        x = rng.uniform(0.3, 3.0, model.n) * rng.choice([-1, 1], model.n)
        if float(cert.b(t, x)) > a3(gamma(t) * float(np.linalg.norm(x))) + 1e-9:
            raise ValueError("budget-cap inequality fails on samples; certificate inconsistent")


def feedback_uniform(model: SystemModel, cert: Certificate, pair: InterleavePair,
                     bank: FeedbackBank, bank_shift: FeedbackBank) -> FeedbackLaw:
    """K = interleaved feedback for x != 0, K(t,0) = 0; uniform-in-time law."""
    _check_uniform_preconditions(model, cert)
    return FeedbackLaw("uniform", model, cert, pair, bank, bank_shift)


def feedback_deadzone(model: SystemModel, cert: Certificate, pair: InterleavePair,
                      bank: FeedbackBank, bank_shift: FeedbackBank) -> FeedbackLaw:
    """Gated law: off where V <= exp(-t), full interleaved feedback above 2 exp(-t)."""
    return FeedbackLaw("deadzone", model, cert, pair, bank, bank_shift)


def raw_scheduler_law(model, cert, bank: FeedbackBank) -> FeedbackLaw:
    return FeedbackLaw("raw_scheduler", model, cert, bank=bank)


def raw_interleave_law(model, cert, pair, bank, bank_shift) -> FeedbackLaw:
    return FeedbackLaw("raw_interleave", model, cert, pair, bank, bank_shift)


@dataclass
class ClosedLoopField:
    """xdot = f(t, d, x, K(t, x)) with exact zero dynamics at the origin."""

    model: SystemModel
    law: FeedbackLaw

    def rhs(self, t: float, d, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if float(np.linalg.norm(x)) < ORIGIN_SNAP:
            return np.zeros(self.model.n)
        u = self.law.u(t, x)
        return self.model.f_at(t, d, x, u)

    def control(self, t: float, x) -> np.ndarray:
        return self.law.u(t, x)

    def subgrid(self, t: float, x) -> int:
        return self.law.subgrid(t, x)


def closed_loop_field(model: SystemModel, law: FeedbackLaw) -> ClosedLoopField:
    return ClosedLoopField(model, law)


def deadzone_exit_time(traj) -> float:
    """First sample time with exp(t) V(t) < 2, or +inf if none."""
    ts = np.asarray(traj.t)
    vs = np.asarray(traj.V)
    hits = np.nonzero(np.exp(ts) * vs < 2.0)[0]
    return float(ts[hits[0]]) if hits.size else math.inf
