"""Scalar comparison functions and smooth transition kernels.

Comparison functions (class-K / class-K+ in the stability literature) are
wrapped as evaluable monotone maps with numerically inverted inverses, since
the synthesis formulas need both directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "MonotoneMap",
    "power_map",
    "linear_map",
    "smooth_step",
    "smooth_step_d",
    "bump1d",
]

_INV_TOL = 1e-12


@dataclass(frozen=True)
class MonotoneMap:
    """Strictly increasing map [0, inf) -> [0, inf) with an inverse.

    ``inverse`` may be None, in which case it is computed by bracketing
    bisection to absolute tolerance 1e-12 on the argument.
    """

    fn: Callable[[float], float]
    inverse: Optional[Callable[[float], float]] = None
    label: str = ""

    def __call__(self, s: float) -> float:
        return self.fn(s)

    def inv(self, y: float) -> float:
        if self.inverse is not None:
            return self.inverse(y)
        return _bisect_inverse(self.fn, y)


def _bisect_inverse(fn: Callable[[float], float], y: float) -> float:
    if y <= fn(0.0):
        return 0.0
    hi = 1.0
    # grow the bracket geometrically; monotonicity makes this safe
    for _ in range(2000):
        if fn(hi) >= y:
            break
        hi *= 2.0
    else:
        raise ValueError(f"cannot bracket inverse at y={y!r}")
    lo = 0.0
    while hi - lo > _INV_TOL * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if fn(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def power_map(coeff: float, exponent: float, label: str = "") -> MonotoneMap:
    """coeff * s**exponent with the exact analytic inverse."""
    if coeff <= 0 or exponent <= 0:
        raise ValueError("power_map needs positive coefficient and exponent")

    def fwd(s: float) -> float:
        return coeff * s ** exponent

    def inv(y: float) -> float:
        if y <= 0.0:
            return 0.0
        return (y / coeff) ** (1.0 / exponent)

    return MonotoneMap(fwd, inv, label or f"{coeff}*s^{exponent}")


def linear_map(coeff: float, label: str = "") -> MonotoneMap:
    return power_map(coeff, 1.0, label or f"{coeff}*s")


def _q(s: float) -> float:
    # exp(-1/s) for s > 0, else 0; flat to all orders at 0
    if s <= 0.0:
        return 0.0
    return math.exp(-1.0 / s)


def smooth_step(s):
    """C-infinity non-decreasing transition: 0 for s <= 0, 1 for s >= 1.

    q(s)/(q(s)+q(1-s)) with q(s) = exp(-1/s); every derivative vanishes at
    both ends, which the feedback formulas rely on for flat joins.
    """
    if isinstance(s, np.ndarray):
        out = np.empty_like(s, dtype=float)
        for i, v in np.ndenumerate(s):
            out[i] = smooth_step(float(v))
        return out
    s = float(s)
    if s <= 0.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    a = _q(s)
    b = _q(1.0 - s)
    return a / (a + b)


def smooth_step_d(s: float) -> float:
    """Derivative of smooth_step (central difference; test helper)."""
    h = 1e-7
    return (smooth_step(s + h) - smooth_step(s - h)) / (2.0 * h)


def bump1d(z):
    """Even C-infinity bump: 1 on |z| <= 1/2, 0 for |z| >= 1.

    Built from smooth_step so it is flat to all orders at the support
    boundary; partitions of unity made from products of these keep the
    synthesized feedback numerically flat across patch seams.
    """
    if isinstance(z, np.ndarray):
        return np.array([bump1d(float(v)) for v in z.flat]).reshape(z.shape)
    z = abs(float(z))
    if z >= 1.0:
        return 0.0
    if z <= 0.5:
        return 1.0
    return smooth_step(2.0 * (1.0 - z))
