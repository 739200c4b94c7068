"""System models, Lyapunov-type certificates, and the builtin example plants.

A model bundles the plant ``xdot = f(t, d, x, u)`` with output ``Y = H(t, x)``,
a compact disturbance set D and a closed positive control cone U.  A
certificate carries a time-varying V together with the comparison functions
that sandwich it and the decrease/budget data used by the synthesis stages.

All callables follow a broadcasting convention: scalar arguments may be
replaced by arrays with matching leading axes when ``model.vectorized`` is
true (the builtins are).  Scalar evaluation is always supported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .kfuncs import MonotoneMap, power_map

__all__ = [
    "ControlCone",
    "FullSpace",
    "NonnegativeCone",
    "SymmetricBox",
    "DisturbanceSet",
    "FinitePoints",
    "BoxGrid",
    "SystemModel",
    "Certificate",
    "DisturbancePath",
    "SamplePlan",
    "CheckResult",
    "HypothesisReport",
    "builtin_system",
    "BUILTIN_NAMES",
    "ConfigurationError",
]

EQUILIBRIUM_TOL = 1e-12
SANDWICH_RTOL = 1e-9


class ConfigurationError(ValueError):
    """Raised for unknown names or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# control cones


class ControlCone:
    """Closed set U with the positive-cone property: u in U, 0<=lam<=1 => lam*u in U."""

    m: int

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> bool:
        raise NotImplementedError

    def directions(self, max_dirs: int = 64) -> np.ndarray:
        """Unit directions used by the control line search, shape (p, m)."""
        raise NotImplementedError

    def max_radius(self, direction: np.ndarray) -> float:
        """Largest admissible magnitude along a unit direction (inf if unbounded)."""
        raise NotImplementedError


@dataclass(frozen=True)
class FullSpace(ControlCone):
    m: int = 1

    def contains(self, u, tol=1e-12):
        return np.all(np.isfinite(u))

    def directions(self, max_dirs: int = 64) -> np.ndarray:
        if self.m == 1:
            return np.array([[1.0], [-1.0]])
        axes = np.concatenate([np.eye(self.m), -np.eye(self.m)])
        if 2 * self.m >= max_dirs or self.m <= 4:
            return axes
        extra = _sphere_points(max_dirs - 2 * self.m, self.m)
        return np.concatenate([axes, extra])

    def max_radius(self, direction):
        return math.inf


@dataclass(frozen=True)
class NonnegativeCone(ControlCone):
    """Componentwise u_i >= 0."""

    m: int = 1

    def contains(self, u, tol=1e-12):
        return bool(np.all(np.asarray(u) >= -tol))

    def directions(self, max_dirs: int = 64) -> np.ndarray:
        return np.eye(self.m)

    def max_radius(self, direction):
        return math.inf


@dataclass(frozen=True)
class SymmetricBox(ControlCone):
    """|u_i| <= radii_i; a cone since scaling toward 0 stays inside."""

    radii: tuple

    @property
    def m(self) -> int:  # type: ignore[override]
        return len(self.radii)

    def contains(self, u, tol=1e-12):
        r = np.asarray(self.radii)
        return bool(np.all(np.abs(np.asarray(u)) <= r * (1 + tol) + tol))

    def directions(self, max_dirs: int = 64) -> np.ndarray:
        m = self.m
        if m == 1:
            return np.array([[1.0], [-1.0]])
        return np.concatenate([np.eye(m), -np.eye(m)])

    def max_radius(self, direction):
        d = np.abs(np.asarray(direction, dtype=float))
        r = np.asarray(self.radii, dtype=float)
        with np.errstate(divide="ignore"):
            lim = np.where(d > 0, r / np.maximum(d, 1e-300), math.inf)
        return float(np.min(lim))


def _sphere_points(count: int, dim: int) -> np.ndarray:
    """Deterministic well-spread unit vectors (seeded Gaussian, normalized)."""
    rng = np.random.default_rng(20240 + dim)
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# disturbance sets


class DisturbanceSet:
    l: int

    def points(self) -> np.ndarray:
        """Discretization used for worst-case maxima, shape (q, l)."""
        raise NotImplementedError

    def contains(self, d, tol: float = 1e-9) -> bool:
        raise NotImplementedError


@dataclass(frozen=True)
class FinitePoints(DisturbanceSet):
    values: tuple  # tuple of tuples, each of length l

    @property
    def l(self) -> int:  # type: ignore[override]
        return len(self.values[0])

    def points(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def contains(self, d, tol=1e-9):
        pts = self.points()
        return bool(np.any(np.all(np.abs(pts - np.asarray(d)) <= tol, axis=1)))


@dataclass(frozen=True)
class BoxGrid(DisturbanceSet):
    """Axis-aligned box with all vertices plus a uniform grid per axis.

    Vertices capture affine-in-d worst cases exactly; the grid guards the rest.
    """

    lo: tuple
    hi: tuple
    grid_per_axis: int = 5

    @property
    def l(self) -> int:  # type: ignore[override]
        return len(self.lo)

    def points(self) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        axes = [np.linspace(lo[i], hi[i], self.grid_per_axis) for i in range(self.l)]
        grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
        corners = np.stack(
            [c.ravel() for c in np.meshgrid(*zip(lo, hi), indexing="ij")], axis=-1
        )
        pts = np.concatenate([corners, grid])
        return np.unique(pts, axis=0)

    def contains(self, d, tol=1e-9):
        d = np.asarray(d)
        return bool(
            np.all(d >= np.asarray(self.lo) - tol) and np.all(d <= np.asarray(self.hi) + tol)
        )


# ---------------------------------------------------------------------------
# the plant and the certificate


@dataclass(frozen=True)
class SystemModel:
    name: str
    n: int
    m: int
    l: int
    k: int
    f: Callable  # (t, d, x, u) -> xdot
    H: Callable  # (t, x) -> output
    D: DisturbanceSet
    U: ControlCone
    vectorized: bool = False
    fast_id: int = -1  # >=0 selects a compiled right-hand side in sim.fastsim

    def f_at(self, t, d, x, u) -> np.ndarray:
        return np.asarray(self.f(t, np.asarray(d, float), np.asarray(x, float), np.asarray(u, float)), dtype=float)

    def output_norm(self, t, x) -> float:
        return float(np.linalg.norm(np.atleast_1d(self.H(t, np.asarray(x, float)))))


@dataclass(frozen=True)
class Certificate:
    """Time-varying V with its comparison-function data.

    v_t / v_x are analytic partials when given; otherwise central finite
    differences with step 1e-6*max(1,|x|) are used.
    """

    V: Callable  # (t, x) -> float
    a1: MonotoneMap
    a2: MonotoneMap
    mu: Callable[[float], float]
    beta: Callable[[float], float]
    rho: Callable[[float], float]
    b: Callable  # (t, x) -> float, x != 0
    v_t: Optional[Callable] = None
    v_x: Optional[Callable] = None
    small_control: Optional[tuple] = None  # (a3: MonotoneMap, gamma: K+ callable)

    def V_at(self, t, x) -> float:
        return float(self.V(t, np.asarray(x, dtype=float)))

    def dV_dt(self, t, x) -> float:
        if self.v_t is not None:
            return float(self.v_t(t, np.asarray(x, dtype=float)))
        h = 1e-6 * max(1.0, abs(t))
        return (self.V_at(t + h, x) - self.V_at(max(t - h, 0.0), x)) / (
            (t + h) - max(t - h, 0.0)
        )

    def dV_dx(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.v_x is not None:
            return np.atleast_1d(np.asarray(self.v_x(t, x), dtype=float))
        h = 1e-6 * max(1.0, float(np.linalg.norm(x)))
        g = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            g[i] = (self.V_at(t, x + e) - self.V_at(t, x - e)) / (2 * h)
        return g


@dataclass(frozen=True)
class DisturbancePath:
    """Piecewise-constant right-continuous disturbance signal.

    ``values[i]`` applies on [breakpoints[i], breakpoints[i+1]).  The class
    realizes the measurable-signal disturbance model by its simulation-dense
    piecewise-constant subclass.
    """

    breakpoints: tuple
    values: tuple  # tuple of l-tuples

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.size != len(self.values):
            raise ValueError("breakpoints and values must have equal length")
        if bp.size > 1 and not np.all(np.diff(bp) > 0):
            raise ValueError("breakpoints must be strictly increasing")

    def at(self, t: float) -> np.ndarray:
        bp = np.asarray(self.breakpoints, dtype=float)
        idx = int(np.searchsorted(bp, t, side="right")) - 1
        idx = min(max(idx, 0), len(self.values) - 1)
        return np.asarray(self.values[idx], dtype=float)

    @staticmethod
    def constant(d0, t0: float = 0.0) -> "DisturbancePath":
        return DisturbancePath((t0,), (tuple(np.atleast_1d(d0)),))

    @staticmethod
    def random(dist: DisturbanceSet, t0: float, t1: float, pieces: int, seed: int) -> "DisturbancePath":
        rng = np.random.default_rng(seed)
        pts = dist.points()
        idx = rng.integers(0, len(pts), size=pieces)
        bps = np.linspace(t0, t1, pieces, endpoint=False)
        return DisturbancePath(tuple(bps), tuple(tuple(pts[i]) for i in idx))


# ---------------------------------------------------------------------------
# hypothesis checking


@dataclass(frozen=True)
class SamplePlan:
    t_range: tuple = (0.0, 10.0)
    x_norm_range: tuple = (1e-3, 1e3)
    n_samples: int = 1000
    seed: int = 7


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst_margin: float
    witness: Optional[tuple] = None  # (t, x) or (t, d)
    note: str = ""


@dataclass(frozen=True)
class HypothesisReport:
    results: tuple

    @property
    def violations(self):
        return [r for r in self.results if not r.passed]

    def __str__(self):
        lines = []
        for r in self.results:
            status = "ok " if r.passed else "FAIL"
            w = "" if r.witness is None else f" witness={r.witness}"
            lines.append(f"[{status}] {r.name}: margin={r.worst_margin:.3e}{w} {r.note}")
        return "\n".join(lines)


def _sample_states(plan: SamplePlan, n_dim: int) -> tuple:
    rng = np.random.default_rng(plan.seed)
    ts = rng.uniform(plan.t_range[0], plan.t_range[1], plan.n_samples)
    lo, hi = plan.x_norm_range
    radii = np.exp(rng.uniform(math.log(lo), math.log(hi), plan.n_samples))
    dirs = rng.standard_normal((plan.n_samples, n_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return ts, radii[:, None] * dirs


def check_hypotheses(model: SystemModel, cert: Certificate, plan: SamplePlan) -> HypothesisReport:
    """Sample-based check of the standing hypotheses and the V sandwich.

    Violations are report entries with witnesses, never exceptions.
    """
    if plan.n_samples <= 0:
        return HypothesisReport(())

    results = []
    ts, xs = _sample_states(plan, model.n)
    d_pts = model.D.points()
    zero_x = np.zeros(model.n)
    zero_u = np.zeros(model.m)

    # equilibrium at the origin, exact up to 1e-12
    worst = 0.0
    wit = None
    for t in ts[: min(64, len(ts))]:
        for d in d_pts:
            r = float(np.max(np.abs(model.f_at(t, d, zero_x, zero_u))))
            if r > worst:
                worst, wit = r, (float(t), tuple(d))
    results.append(CheckResult("equilibrium_f", worst <= EQUILIBRIUM_TOL, EQUILIBRIUM_TOL - worst, wit))
    worst = 0.0
    wit = None
    for t in ts[: min(64, len(ts))]:
        r = float(np.max(np.abs(np.atleast_1d(model.H(t, zero_x)))))
        if r > worst:
            worst, wit = r, (float(t),)
    results.append(CheckResult("equilibrium_H", worst <= EQUILIBRIUM_TOL, EQUILIBRIUM_TOL - worst, wit))

    # sandwich bounds, relative tolerance 1e-9
    worst_lo = math.inf
    worst_hi = math.inf
    wit_lo = wit_hi = None
    for t, x in zip(ts, xs):
        v = cert.V_at(t, x)
        nx = float(np.linalg.norm(x))
        lo = cert.a1(model.output_norm(t, x) + cert.mu(t) * nx)
        hi = cert.a2(cert.beta(t) * nx)
        scale = max(1.0, abs(v))
        mlo = (v - lo) / scale
        mhi = (hi - v) / scale
        if mlo < worst_lo:
            worst_lo, wit_lo = mlo, (float(t), tuple(x))
        if mhi < worst_hi:
            worst_hi, wit_hi = mhi, (float(t), tuple(x))
    results.append(
        CheckResult("sandwich_lower", worst_lo >= -SANDWICH_RTOL, worst_lo, wit_lo)
    )
    results.append(
        CheckResult("sandwich_upper", worst_hi >= -SANDWICH_RTOL, worst_hi, wit_hi)
    )

    # control-budget cap when the small-control data is present
    if cert.small_control is not None:
        a3, gamma = cert.small_control
        worst = math.inf
        wit = None
        for t, x in zip(ts, xs):
            margin = a3(gamma(t) * float(np.linalg.norm(x))) - float(cert.b(t, x))
            if margin < worst:
                worst, wit = margin, (float(t), tuple(x))
        results.append(CheckResult("budget_cap", worst >= -SANDWICH_RTOL, worst, wit))

    # decrease rate positive-definite on samples
    rng = np.random.default_rng(plan.seed + 1)
    svals = np.exp(rng.uniform(-8, 4, 256))
    worst = math.inf
    wit = None
    for s in svals:
        r = float(cert.rho(float(s)))
        if r < worst:
            worst, wit = r, (float(s),)
    rho0 = abs(float(cert.rho(0.0)))
    results.append(
        CheckResult(
            "rho_positive_definite",
            worst > 0.0 and rho0 <= EQUILIBRIUM_TOL,
            worst,
            wit,
            note=f"rho(0)={rho0:.1e}",
        )
    )

    # cone property: scaled members stay inside
    rng = np.random.default_rng(plan.seed + 2)
    ok = True
    wit = None
    for _ in range(64):
        u = rng.standard_normal(model.m)
        if not model.U.contains(u):
            continue
        lam = rng.uniform(0, 1)
        if not model.U.contains(lam * u):
            ok = False
            wit = (float(lam), tuple(u))
            break
    results.append(CheckResult("cone_scaling", ok, 0.0 if ok else -1.0, wit))

    # Lipschitz quotient bounded on a compact sample (reported, informational)
    rng = np.random.default_rng(plan.seed + 3)
    quot = 0.0
    for _ in range(128):
        t = rng.uniform(*plan.t_range)
        x = rng.uniform(-2, 2, model.n)
        y = x + rng.uniform(-0.1, 0.1, model.n)
        u = rng.uniform(-1, 1, model.m)
        v = u + rng.uniform(-0.1, 0.1, model.m)
        d = d_pts[rng.integers(0, len(d_pts))]
        num = float(np.linalg.norm(model.f_at(t, d, x, u) - model.f_at(t, d, y, v)))
        den = float(np.linalg.norm(x - y) + np.linalg.norm(u - v))
        if den > 1e-12:
            quot = max(quot, num / den)
    results.append(
        CheckResult("lipschitz_quotient", math.isfinite(quot), quot, None, note="sampled sup")
    )

    return HypothesisReport(tuple(results))


# ---------------------------------------------------------------------------
# builtin systems

BUILTIN_NAMES = ("S1_linear_remark24", "S2_cubic_example211", "S3_scalar_integrator")


def _builtin_s1() -> tuple:
    def f(t, d, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.stack([x[..., 0], u[..., 0]], axis=-1)

    def H(t, x):
        x = np.asarray(x, dtype=float)
        return x[..., 1:2]

    def V(t, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.exp(-4.0 * t) * x[..., 0] ** 2 + 0.5 * x[..., 1] ** 2

    def v_t(t, x):
        x = np.asarray(x, dtype=float)
        return -2.0 * np.exp(-4.0 * t) * x[..., 0] ** 2

    def v_x(t, x):
        x = np.asarray(x, dtype=float)
        return np.stack([np.exp(-4.0 * t) * x[..., 0], x[..., 1]], axis=-1)

    def b(t, x):
        x = np.asarray(x, dtype=float)
        return np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)

    model = SystemModel(
        name="S1_linear_remark24",
        n=2, m=1, l=1, k=1,
        f=f, H=H,
        D=FinitePoints(((0.0,),)),
        U=FullSpace(1),
        vectorized=True,
        fast_id=1,
    )
    cert = Certificate(
        V=V,
        a1=power_map(1.0 / 16.0, 2.0, "s^2/16"),
        a2=power_map(1.0, 2.0, "s^2"),
        mu=lambda t: math.exp(-2.0 * t),
        beta=lambda t: 1.0,
        rho=lambda s: s,
        b=b,
        v_t=v_t,
        v_x=v_x,
        small_control=(power_map(1.0, 1.0, "s"), lambda t: 1.0),
    )
    return model, cert


def _builtin_s2() -> tuple:
    def f(t, d, x, u):
        d = np.asarray(d, dtype=float)
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return (d[..., 0] * x[..., 0] + u[..., 0] ** 3)[..., None]

    def H(t, x):
        return np.asarray(x, dtype=float)[..., 0:1]

    def V(t, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x[..., 0] ** 2

    model = SystemModel(
        name="S2_cubic_example211",
        n=1, m=1, l=1, k=1,
        f=f, H=H,
        D=BoxGrid((-1.0,), (1.0,), 5),
        U=FullSpace(1),
        vectorized=True,
        fast_id=2,
    )
    cert = Certificate(
        V=V,
        a1=power_map(1.0 / 8.0, 2.0, "s^2/8"),
        a2=power_map(1.0, 2.0, "s^2"),
        mu=lambda t: 1.0,
        beta=lambda t: 1.0,
        rho=lambda s: s,
        b=lambda t, x: 2.0,
        v_t=lambda t, x: 0.0 * np.asarray(x, dtype=float)[..., 0],
        v_x=lambda t, x: np.asarray(x, dtype=float)[..., 0:1],
    )
    return model, cert


def _builtin_s3() -> tuple:
    def f(t, d, x, u):
        u = np.asarray(u, dtype=float)
        return u[..., 0:1]

    def H(t, x):
        return np.asarray(x, dtype=float)[..., 0:1]

    def V(t, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x[..., 0] ** 2

    def b(t, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * np.abs(x[..., 0])

    model = SystemModel(
        name="S3_scalar_integrator",
        n=1, m=1, l=1, k=1,
        f=f, H=H,
        D=FinitePoints(((0.0,),)),
        U=FullSpace(1),
        vectorized=True,
        fast_id=3,
    )
    cert = Certificate(
        V=V,
        a1=power_map(1.0 / 8.0, 2.0, "s^2/8"),
        a2=power_map(1.0, 2.0, "s^2"),
        mu=lambda t: 1.0,
        beta=lambda t: 1.0,
        rho=lambda s: s,
        b=b,
        v_t=lambda t, x: 0.0 * np.asarray(x, dtype=float)[..., 0],
        v_x=lambda t, x: np.asarray(x, dtype=float)[..., 0:1],
    )
    return model, cert


def builtin_system(name: str) -> tuple:
    """Return the (SystemModel, Certificate) pair for a builtin plant."""
    table = {
        "S1_linear_remark24": _builtin_s1,
        "S2_cubic_example211": _builtin_s2,
        "S3_scalar_integrator": _builtin_s3,
    }
    # short aliases accepted everywhere names are read from configs
    aliases = {"S1": "S1_linear_remark24", "S2": "S2_cubic_example211", "S3": "S3_scalar_integrator"}
    key = aliases.get(name, name)
    if key not in table:
        raise ConfigurationError(f"unknown builtin system {name!r}; known: {BUILTIN_NAMES}")
    return table[key]()
