"""Closed-loop integration with feedback-subgrid-aligned fixed steps.

The synthesized feedback is smooth inside each 1/N subinterval of a unit
time interval and vanishes exactly on the subgrid, so the classical 4-stage
Runge-Kutta scheme keeps its order as long as steps never straddle subgrid
points.  Steps are therefore indexed on a per-unit dyadic grid that refines
(exactly, powers of two) whenever a band change demands it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .minimax import seed_from
from .model import SystemModel

__all__ = [
    "StepPolicy",
    "DisturbanceStrategy",
    "Trajectory",
    "IntegrationError",
    "integrate",
    "batch",
    "write_csv",
    "read_csv",
]


class IntegrationError(RuntimeError):
    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class StepPolicy:
    """Base step plus the per-band refinement rule (steps per subinterval)."""

    base: float = 0.01
    subgrid_mult: int = 8
    record: str = "all"  # "all" | "unit"
    blowup: float = 1e9
    eps_track: float = 1e-2

    def grid_count(self, n_band: int) -> int:
        need = max(n_band * self.subgrid_mult, int(math.ceil(1.0 / self.base)), 1)
        g = 1
        while g < need:
            g *= 2
        return g


@dataclass(frozen=True)
class DisturbanceStrategy:
    """constant(d0) | piecewise_random(seed, dwell) | vertex_adversarial."""

    kind: str = "constant"
    d0: Optional[tuple] = None
    seed: int = 0
    dwell: Optional[float] = None  # None: one integration step

    def describe(self) -> str:
        if self.kind == "constant":
            return f"constant({self.d0 if self.d0 is not None else 'D[0]'})"
        if self.kind == "piecewise_random":
            return f"piecewise_random(seed={self.seed}, dwell={self.dwell})"
        return self.kind


def _pick_random(pts: np.ndarray, seed: int, counter: int) -> np.ndarray:
    z = (seed_from(seed, counter) * 0x9E3779B97F4A7C15) & ((1 << 63) - 1)
    return pts[z % len(pts)]


@dataclass
class Trajectory:
    """Time-stamped closed-loop samples plus per-unit envelope statistics."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    V: np.ndarray
    absY: np.ndarray
    meta: dict = field(default_factory=dict)
    truncated: bool = False
    unit_t0: float = 0.0
    unit_v_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    unit_y_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    last_y_exceed: float = -math.inf

    def __post_init__(self):
        if len(self.t) and not np.all(np.diff(self.t) > 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def n_samples(self) -> int:
        return len(self.t)

    def window_v_max(self, a: float, b: float) -> float:
        """Max recorded V over [a, b] (per-unit envelopes plus samples)."""
        out = -math.inf
        mask = (self.t >= a - 1e-12) & (self.t <= b + 1e-12)
        if np.any(mask):
            out = float(np.max(self.V[mask]))
        j0 = int(math.floor(self.unit_t0))
        for k, vm in enumerate(self.unit_v_max):
            u_lo, u_hi = j0 + k, j0 + k + 1
            if u_hi > a + 1e-12 and u_lo < b - 1e-12:
                out = max(out, float(vm))
        return out

    def value_at(self, tq: float) -> Optional[float]:
        idx = int(np.argmin(np.abs(self.t - tq))) if len(self.t) else None
        if idx is None or abs(float(self.t[idx]) - tq) > 1e-9:
            return None
        return float(self.V[idx])


def integrate(field, t0: float, x0, strategy: DisturbanceStrategy, horizon: float,
              policy: StepPolicy = StepPolicy()) -> Trajectory:
    """Fixed-step RK4 snapped to the feedback's per-unit dyadic subgrid.

    The disturbance is held constant within each step.  Integration stops
    early, flagging the trajectory, if |x| exceeds the blow-up guard.
    """
    model: SystemModel = field.model
    cert = field.law.cert
    x = np.asarray(x0, dtype=float).copy()
    t = float(t0)
    t_end = t0 + float(horizon)
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    d_pts = model.D.points()

    rec_all = policy.record == "all"
    rows = []
    unit_v, unit_y = [], []
    last_exceed = -math.inf
    truncated = False
    step_counter = 0

    def v_of(tt, xx):
        return float(cert.V_at(max(tt, 0.0), xx))

    def y_of(tt, xx):
        return model.output_norm(max(tt, 0.0), xx)

    def pick_d(tt, xx, uu):
        if strategy.kind == "constant":
            return np.asarray(strategy.d0 if strategy.d0 is not None else d_pts[0], dtype=float)
        if strategy.kind == "piecewise_random":
            if strategy.dwell:
                return _pick_random(d_pts, strategy.seed, int(math.floor(tt / strategy.dwell)))
            return _pick_random(d_pts, strategy.seed, step_counter)
        if strategy.kind == "vertex_adversarial":
            vt = cert.dV_dt(max(tt, 0.0), xx)
            vx = cert.dV_dx(max(tt, 0.0), xx)
            best, best_d = -math.inf, d_pts[0]
            for dd in d_pts:
                val = vt + float(vx @ model.f_at(max(tt, 0.0), dd, xx, uu))
                if val > best:
                    best, best_d = val, dd
            return np.asarray(best_d, dtype=float)
        raise ValueError(strategy.kind)

    cur_v = v_of(t, x)
    cur_y = y_of(t, x)
    u_now = field.control(t, x)
    d_now = pick_d(t, x, u_now)
    rows.append((t, x.copy(), u_now.copy(), d_now.copy(), cur_v, cur_y))
    vmax_unit, ymax_unit = cur_v, cur_y
    if cur_y > policy.eps_track:
        last_exceed = t

    while t < t_end - 1e-12:
        j = int(math.floor(t + 1e-12))
        unit_end = min(float(j + 1), t_end)
        G = policy.grid_count(field.subgrid(t, x))
        k_idx = int(math.floor((t - j) * G + 1e-9))
        while t < unit_end - 1e-12:
            g_now = policy.grid_count(field.subgrid(t, x))
            if g_now > G:
                k_idx = k_idx * (g_now // G)
                G = g_now
            t_next = min(j + (k_idx + 1) / G, unit_end)
            h = t_next - t
            u_now = field.control(t, x)
            d_now = pick_d(t, x, u_now)
            k1 = field.rhs(t, d_now, x)
            k2 = field.rhs(t + h / 2, d_now, x + (h / 2) * k1)
            k3 = field.rhs(t + h / 2, d_now, x + (h / 2) * k2)
            k4 = field.rhs(t + h, d_now, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t_next
            k_idx += 1
            step_counter += 1
            if not np.all(np.isfinite(x)):
                raise IntegrationError(
                    f"non-finite state at t={t}", _finish(
                        rows, unit_v, unit_y, vmax_unit, ymax_unit, t0, last_exceed, True,
                        field, strategy, policy)
                )
            cur_v = v_of(t, x)
            cur_y = y_of(t, x)
            vmax_unit = max(vmax_unit, cur_v)
            ymax_unit = max(ymax_unit, cur_y)
            if cur_y > policy.eps_track:
                last_exceed = t
            on_grid = abs(t - round(t)) < 1e-12
            if rec_all or on_grid or t >= t_end - 1e-12:
                u_rec = field.control(t, x) if (rec_all or on_grid) else u_now
                rows.append((t, x.copy(), np.asarray(u_rec, float).copy(),
                             d_now.copy(), cur_v, cur_y))
            if float(np.linalg.norm(x)) > policy.blowup:
                truncated = True
                break
        unit_v.append(vmax_unit)
        unit_y.append(ymax_unit)
        vmax_unit = cur_v
        ymax_unit = cur_y
        if truncated:
            break

    return _finish(rows, unit_v, unit_y, vmax_unit, ymax_unit, t0, last_exceed,
                   truncated, field, strategy, policy)


def _finish(rows, unit_v, unit_y, vmax_cur, ymax_cur, t0, last_exceed, truncated,
            field, strategy, policy) -> Trajectory:
    ts = np.array([r[0] for r in rows])
    keep = np.concatenate([[True], np.diff(ts) > 0])
    rows = [r for r, k in zip(rows, keep) if k]
    return Trajectory(
        t=np.array([r[0] for r in rows]),
        x=np.array([r[1] for r in rows]),
        u=np.array([r[2] for r in rows]),
        d=np.array([r[3] for r in rows]),
        V=np.array([r[4] for r in rows]),
        absY=np.array([r[5] for r in rows]),
        meta={
            "t0": t0,
            "x0": rows[0][1].tolist(),
            "law": field.law.kind,
            "strategy": strategy.describe(),
            "seed": strategy.seed,
            "policy": (policy.base, policy.subgrid_mult, policy.record),
        },
        truncated=truncated,
        unit_t0=t0,
        unit_v_max=np.asarray(unit_v if unit_v else [vmax_cur]),
        unit_y_max=np.asarray(unit_y if unit_y else [ymax_cur]),
        last_y_exceed=last_exceed,
    )


def simulate(field, t0: float, x0, strategy: DisturbanceStrategy, horizon: float,
             policy: StepPolicy = StepPolicy(), engine: str = "auto") -> Trajectory:
    """Integrate with the compiled kernel when available, else pure Python.

    Both engines implement the same stepping rules; a given engine is fully
    deterministic.  ``engine`` is one of "auto", "fast", "python".
    """
    if engine in ("auto", "fast"):
        from . import fastsim

        runner = fastsim.make_runner(field)
        if runner is not None:
            return runner.integrate(t0, x0, strategy, horizon, policy)
        if engine == "fast":
            raise ValueError("fast engine unavailable for this field")
    return integrate(field, t0, x0, strategy, horizon, policy)


def batch(field, starts: Sequence, strategies: Sequence[DisturbanceStrategy],
          horizon: float, policy: StepPolicy = StepPolicy(),
          seed_base: int = 0, engine: str = "auto") -> tuple:
    """Deterministic fan-out over starts x strategies, failures collected.

    Returns (trajectories, failures); trajectory order follows the cross
    product, seeds derive from the item index.
    """
    trajs: List[Optional[Trajectory]] = []
    failures = []
    idx = 0
    for (t0, x0) in starts:
        for strat in strategies:
            st = strat
            if strat.kind == "piecewise_random":
                st = DisturbanceStrategy(
                    "piecewise_random", seed=seed_from(seed_base, strat.seed, idx) & 0xFFFFFFFF,
                    dwell=strat.dwell,
                )
            try:
                trajs.append(simulate(field, t0, x0, st, horizon, policy, engine=engine))
            except (IntegrationError, RuntimeError) as exc:  # collect, keep going
                failures.append((idx, (t0, tuple(np.atleast_1d(x0))), str(exc)))
                trajs.append(None)
            idx += 1
    return trajs, failures


def write_csv(traj: Trajectory, path: str) -> None:
    n = traj.x.shape[1]
    m = traj.u.shape[1]
    l = traj.d.shape[1]
    header = (
        ["t"]
        + [f"x_{i + 1}" for i in range(n)]
        + [f"u_{i + 1}" for i in range(m)]
        + [f"d_{i + 1}" for i in range(l)]
        + ["V", "absY"]
    )
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(traj.n_samples):
            vals = (
                [traj.t[k]] + list(traj.x[k]) + list(traj.u[k]) + list(traj.d[k])
                + [traj.V[k], traj.absY[k]]
            )
            fh.write(",".join(f"{v:.17g}" for v in vals) + "\n")


def read_csv(path: str) -> Trajectory:
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    n = sum(1 for s in names if s.startswith("x_"))
    m = sum(1 for s in names if s.startswith("u_"))
    l = sum(1 for s in names if s.startswith("d_"))
    rows = np.atleast_1d(data)
    get = lambda pref, cnt: np.stack([rows[f"{pref}_{i + 1}"] for i in range(cnt)], axis=-1)
    return Trajectory(
        t=np.atleast_1d(rows["t"]),
        x=np.atleast_2d(get("x", n)),
        u=np.atleast_2d(get("u", m)),
        d=np.atleast_2d(get("d", l)),
        V=np.atleast_1d(rows["V"]),
        absY=np.atleast_1d(rows["absY"]),
        unit_t0=float(np.atleast_1d(rows["t"])[0]),
    )
