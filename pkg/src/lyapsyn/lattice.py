"""Lazy patch tables on a scaled lattice, for the per-band feedback banks.

Patches live on a fixed integer lattice in transformed coordinates: time is
shifted/scaled, each state axis is asinh-scaled.  Cell geometry is a pure
function of the integer coordinates, so cells can be materialized on demand
in any order with identical results; evaluation at a point only ever sees
the cells whose support contains it.

Compared to the explicit grid covering this trades the isotropic taxicab
patch shape for per-axis boxes.  The box geometry keeps the two facts the
budget-envelope bound needs: support time-halfwidth at most 1, and support
state deviation at most half the center norm (so patch centers stay inside
the 2/3..2 norm sandwich of any point they cover).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product as iproduct
from typing import Dict, Tuple

import numpy as np

from .kfuncs import bump1d, smooth_step
from .minimax import lie_values, seed_from, u_candidates
from .model import Certificate, SystemModel
from .unitloop import BandsView

__all__ = ["LatticeParams", "CellCertificationError", "LatticePatchTable"]

CERT_INTERIOR_SAMPLES = 6


class CellCertificationError(RuntimeError):
    """No admissible control certifies a cell; carries the cell and best margin."""

    def __init__(self, coord, center, best_margin, reason=""):
        super().__init__(
            f"cell {coord} at {center} not certifiable (best margin {best_margin:.3e}) {reason}"
        )
        self.coord = coord
        self.center = center
        self.best_margin = best_margin
        self.reason = reason


@dataclass(frozen=True)
class LatticeParams:
    """Pure geometry of one patch table (everything the cells derive from)."""

    t_ref: float
    t_span: float
    sigma: float
    x_lo: float
    x_hi: float
    n: int
    u_cap: float
    level: int = 0
    s_t: float = 0.35
    s_x: float = 0.25
    seed: int = 0

    @property
    def h_t(self) -> float:
        return self.s_t / (1 << self.level)

    @property
    def h_x(self) -> float:
        return self.s_x / (1 << self.level)

    @property
    def weight(self) -> float:
        # uniform plateau weight from the provable stencil overlap bound
        return 1.0 / (4.0 * 3 ** (1 + self.n))


class LatticePatchTable:
    """Materialize-on-touch patch table implementing the covering protocol."""

    def __init__(self, model: SystemModel, cert: Certificate, params: LatticeParams):
        self.model = model
        self.cert = cert
        self.params = params
        self.cells: Dict[Tuple[int, ...], int] = {}
        self.cell_u: list = []
        self.cell_phi: list = []
        self._budget_floor = 1e-300

    # -- coordinates -------------------------------------------------------

    def xi(self, t: float, x: np.ndarray) -> np.ndarray:
        p = self.params
        out = np.empty(1 + p.n)
        out[0] = (t - p.t_ref) / p.h_t
        out[1:] = np.arcsinh(np.asarray(x, dtype=float) / p.sigma) / p.h_x
        return out

    def cell_center(self, coord: Tuple[int, ...]) -> tuple:
        p = self.params
        t_c = p.t_ref + (coord[0] + 0.5) * p.h_t
        x_c = p.sigma * np.sinh((np.asarray(coord[1:], dtype=float) + 0.5) * p.h_x)
        return t_c, x_c

    def support_box(self, coord: Tuple[int, ...]) -> tuple:
        """Physical (t, x) intervals of the patch support (+-1 around center in xi)."""
        p = self.params
        c0 = coord[0]
        t_iv = (p.t_ref + (c0 - 0.5) * p.h_t, p.t_ref + (c0 + 1.5) * p.h_t)
        x_lo = p.sigma * np.sinh((np.asarray(coord[1:], dtype=float) - 0.5) * p.h_x)
        x_hi = p.sigma * np.sinh((np.asarray(coord[1:], dtype=float) + 1.5) * p.h_x)
        return t_iv, x_lo, x_hi

    def clamp(self, t: float, x) -> tuple:
        p = self.params
        x = np.asarray(x, dtype=float)
        r = float(np.linalg.norm(x))
        if r == 0.0:
            raise ValueError("patch table undefined at x = 0")
        rc = min(max(r, p.x_lo), p.x_hi)
        tc = min(max(float(t), p.t_ref), p.t_ref + p.t_span)
        return tc, x * (rc / r)

    def stencil(self, xi: np.ndarray) -> list:
        axes = []
        for v in xi:
            base = math.floor(v - 1.5)
            cands = [c for c in (base + 1, base + 2, base + 3) if abs(v - c - 0.5) < 1.0]
            axes.append(cands)
        return [tuple(c) for c in iproduct(*axes)]

    # -- certification -----------------------------------------------------

    def materialize(self, coord: Tuple[int, ...]) -> int:
        row = self.cells.get(coord)
        if row is not None:
            return row
        u, phi = self._certify(coord)
        row = len(self.cell_u)
        self.cell_u.append(u)
        self.cell_phi.append(phi)
        self.cells[coord] = row
        return row

    def _box_samples(self, coord) -> tuple:
        p = self.params
        t_c, x_c = self.cell_center(coord)
        t_iv, x_lo, x_hi = self.support_box(coord)
        pts_t = [t_c]
        pts_x = [np.asarray(x_c, dtype=float)]
        # corners in xi-space
        for corner in iproduct(*([(lo, hi) for lo, hi in zip(x_lo, x_hi)])):
            for tv in t_iv:
                pts_t.append(tv)
                pts_x.append(np.asarray(corner, dtype=float))
        rng = np.random.default_rng(seed_from(p.seed, p.level, *coord, 31))
        tv = rng.uniform(t_iv[0], t_iv[1], CERT_INTERIOR_SAMPLES)
        xv = rng.uniform(0.0, 1.0, (CERT_INTERIOR_SAMPLES, len(x_lo)))
        xv = x_lo + xv * (x_hi - x_lo)
        pts_t.extend(tv.tolist())
        pts_x.extend(list(xv))
        return pts_t, pts_x

    def _certify(self, coord) -> tuple:
        p = self.params
        t_c, x_c = self.cell_center(coord)
        nx_c = float(np.linalg.norm(x_c))
        t_iv, x_lo, x_hi = self.support_box(coord)

        # geometry caps behind the budget-envelope chain
        if (t_iv[1] - t_iv[0]) / 2.0 > 1.0 + 1e-9:
            raise CellCertificationError(coord, (t_c, tuple(x_c)), math.inf, "t-extent cap")
        dev = np.maximum(np.abs(x_hi - x_c), np.abs(x_c - x_lo))
        if float(np.linalg.norm(dev)) > 0.5 * nx_c * (1 + 1e-9):
            raise CellCertificationError(coord, (t_c, tuple(x_c)), math.inf, "norm cap")

        budget = min(float(self.cert.b(max(t_c, 0.0), x_c)), p.u_cap)
        cands = u_candidates(self.model.U, budget, 32, 16)
        order = np.argsort(np.linalg.norm(cands, axis=1), kind="stable")
        cands = cands[order]

        v_c = self.cert.V_at(max(t_c, 0.0), x_c)
        need = -float(self.cert.rho(v_c)) / 16.0

        pts_t, pts_x = self._box_samples(coord)
        d_pts = self.model.D.points()
        if self.model.vectorized:
            worst, phi_raw = self._margins_batched(pts_t, pts_x, cands, d_pts)
        else:
            worst = np.full(len(cands), -math.inf)
            phi_raw = -math.inf
            for tt, xx in zip(pts_t, pts_x):
                vals = lie_values(self.model, self.cert, tt, xx, cands, d_pts)
                margins = np.max(vals, axis=1) + 0.75 * float(
                    self.cert.rho(self.cert.V_at(max(tt, 0.0), xx))
                )
                worst = np.maximum(worst, margins)
                phi_raw = max(phi_raw, float(np.max(vals)))

        ok = np.nonzero(worst <= need)[0]
        if ok.size == 0:
            raise CellCertificationError(
                coord, (t_c, tuple(x_c)), float(np.min(worst)), "no admissible control"
            )
        u_star = cands[int(ok[0])]  # smallest magnitude that certifies
        phi = max(1.0, 1.1 * phi_raw)
        return np.asarray(u_star, dtype=float), phi

    def _margins_batched(self, pts_t, pts_x, cands, d_pts):
        """Box-worst margins per candidate in one broadcast evaluation.

        The builtin plants broadcast over a leading (points, candidates,
        disturbances) block, including an array time axis.
        """
        P, C, Dn = len(pts_t), len(cands), len(d_pts)
        n = self.model.n
        tcs = np.maximum(np.asarray(pts_t, dtype=float), 0.0)
        xs = np.asarray(pts_x)
        vts = np.empty(P)
        vxs = np.empty((P, n))
        rhos = np.empty(P)
        for a in range(P):
            vts[a] = self.cert.dV_dt(tcs[a], xs[a])
            vxs[a] = self.cert.dV_dx(tcs[a], xs[a])
            rhos[a] = self.cert.rho(self.cert.V_at(tcs[a], xs[a]))
        tt = tcs[:, None, None]
        uu = np.broadcast_to(cands[None, :, None, :], (P, C, Dn, cands.shape[1]))
        dd = np.broadcast_to(d_pts[None, None, :, :], (P, C, Dn, d_pts.shape[1]))
        xx = np.broadcast_to(xs[:, None, None, :], (P, C, Dn, n))
        fx = np.asarray(self.model.f(tt, dd, xx, uu), dtype=float)
        vals = vts[:, None, None] + np.einsum("pcdn,pn->pcd", fx, vxs)
        if not np.all(np.isfinite(vals)):
            raise CellCertificationError((), (float(tcs[0]), tuple(xs[0])), math.nan, "non-finite")
        worst = np.max(np.max(vals, axis=2) + 0.75 * rhos[:, None], axis=0)
        phi_raw = float(np.max(vals))
        return worst, phi_raw

    # -- covering protocol ---------------------------------------------------

    def bands_at(self, t: float, x) -> BandsView:
        tc, xc = self.clamp(t, x)
        xi = self.xi(tc, xc)
        coords = self.stencil(xi)
        raws, us, phis = [], [], []
        for coord in sorted(coords):
            val = 1.0
            for v, c in zip(xi, coord):
                val *= bump1d(v - c - 0.5)
                if val == 0.0:
                    break
            if val <= 0.0:
                continue
            row = self.materialize(coord)
            raws.append(val)
            us.append(self.cell_u[row])
            phis.append(self.cell_phi[row])
        if not raws:
            raise CellCertificationError(tuple(np.floor(xi).astype(int)), (tc, tuple(xc)), math.inf, "empty stencil")
        raw = np.asarray(raws)
        return BandsView(raw / raw.sum(), np.asarray(us), np.asarray(phis), self.params.weight)

    @property
    def size(self) -> int:
        return len(self.cell_u)
