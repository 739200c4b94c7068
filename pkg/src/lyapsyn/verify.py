"""Empirical stability checks over closed-loop trajectory batches.

Each check turns a stability notion into a sampled procedure with margins
and replayable witnesses.  Reports state the disturbance strategy classes
actually tested; the formal notions quantify over all measurable signals,
which no finite batch covers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .interleave import InterleavePair, rho_tilde
from .model import Certificate

__all__ = [
    "Finding",
    "StabilityReport",
    "check_rfc",
    "check_rgaos",
    "check_urgaos",
    "check_lemma34",
    "fact2_threshold",
    "fact2_check",
    "tau_cap",
    "gamma_sum_closed_form",
]


@dataclass(frozen=True)
class Finding:
    prop: str
    cell: str
    passed: bool
    margin: float
    witness: Optional[dict] = None
    note: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        wit = "" if self.witness is None else f" witness={json.dumps(self.witness, sort_keys=True)}"
        return f"{status} {self.prop} [{self.cell}] margin={self.margin:.6g}{wit} {self.note}".rstrip()


@dataclass
class StabilityReport:
    prop: str
    findings: List[Finding] = field(default_factory=list)
    estimates: dict = field(default_factory=dict)
    tested_class: str = ""

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.findings)

    def to_text(self) -> str:
        head = f"# {self.prop} (tested disturbance classes: {self.tested_class or 'n/a'})"
        est = [f"# estimate {k} = {v}" for k, v in sorted(self.estimates.items())]
        return "\n".join([head] + est + [f.line() for f in self.findings])

    def to_json(self) -> dict:
        return {
            "property": self.prop,
            "passed": self.passed,
            "estimates": self.estimates,
            "tested_class": self.tested_class,
            "findings": [
                {
                    "cell": f.cell, "passed": f.passed, "margin": f.margin,
                    "witness": f.witness, "note": f.note,
                }
                for f in self.findings
            ],
        }


def _witness(traj) -> dict:
    return {
        "t0": traj.meta.get("t0"),
        "x0": traj.meta.get("x0"),
        "seed": traj.meta.get("seed"),
        "strategy": traj.meta.get("strategy"),
    }


def _classes(batch) -> str:
    return ",".join(sorted({t.meta.get("strategy", "?").split("(")[0] for t in batch if t}))


def check_rfc(batch: Sequence) -> StabilityReport:
    """No blow-up truncation; reports the batch sup of the state norm."""
    rep = StabilityReport("RFC", tested_class=_classes(batch))
    sup_norm = 0.0
    for traj in batch:
        if traj is None:
            continue
        sup_norm = max(sup_norm, float(np.max(np.linalg.norm(traj.x, axis=1))))
        rep.findings.append(
            Finding("RFC", "no-truncation", not traj.truncated,
                    -1.0 if traj.truncated else 1.0,
                    _witness(traj) if traj.truncated else None)
        )
    rep.estimates["sup_norm"] = sup_norm
    if not batch:
        rep.findings.append(Finding("RFC", "empty-batch", True, 0.0, note="vacuous"))
        rep.estimates["sup_norm"] = 0.0
    return rep


def _tau_of(traj, eps: float) -> float:
    """Settling lag: end of the last unit interval with the output above eps."""
    t0 = traj.unit_t0
    j0 = math.floor(t0)
    tau = 0.0
    for k, ym in enumerate(traj.unit_y_max):
        if ym > eps:
            tau = (j0 + k + 1) - t0
    return tau


def _y_sup(traj) -> float:
    return float(np.max(traj.unit_y_max)) if len(traj.unit_y_max) else float(np.max(traj.absY))


def check_rgaos(batch: Sequence, eps_list, T_list, R_list) -> StabilityReport:
    """Lagrange/Lyapunov output stability plus attractivity lag estimates.

    Per (eps, T): the output sup over runs starting within the cell, the
    largest tested start radius keeping the output below eps throughout
    (the delta estimate), and per (eps, T, R) the smallest settling lag tau
    valid across the cell's runs.
    """
    rep = StabilityReport("RGAOS", tested_class=_classes(batch))
    runs = [t for t in batch if t is not None]
    for eps in eps_list:
        for T in T_list:
            cell = [t for t in runs if t.meta.get("t0", 0.0) <= T + 1e-12]
            sup_y = max((_y_sup(t) for t in cell), default=0.0)
            rep.estimates[f"supY(T={T})"] = sup_y
            rep.findings.append(
                Finding("RGAOS-P1", f"eps={eps},T={T}", math.isfinite(sup_y), sup_y,
                        note="Lagrange output bound")
            )
            radii = sorted({float(np.linalg.norm(t.meta.get("x0"))) for t in cell})
            delta = 0.0
            for r in radii:
                group = [t for t in cell if np.linalg.norm(t.meta.get("x0")) <= r + 1e-12]
                if all(_y_sup(t) <= eps for t in group):
                    delta = r
            rep.estimates[f"delta(eps={eps},T={T})"] = delta
            for R in R_list:
                group = [t for t in cell if np.linalg.norm(t.meta.get("x0")) <= R + 1e-12]
                if not group:
                    continue
                tau = max(_tau_of(t, eps) for t in group)
                horizon_ok = all(
                    t.t[-1] - t.meta.get("t0", 0.0) > tau + 1e-9 for t in group
                )
                rep.estimates[f"tau(eps={eps},T={T},R={R})"] = tau
                rep.findings.append(
                    Finding("RGAOS-P2", f"eps={eps},T={T},R={R}", horizon_ok, tau,
                            None if horizon_ok else _witness(group[0]),
                            note="settling lag within horizon")
                )
    return rep


def check_urgaos(batch: Sequence, eps_list, R_list, degrade: float = 2.0) -> StabilityReport:
    """As the non-uniform check, but estimates must be start-time independent.

    The batch is grouped by start time; a tau or delta estimate degrading by
    more than the flag ratio across groups is a finding.
    """
    rep = StabilityReport("URGAOS", tested_class=_classes(batch))
    runs = [t for t in batch if t is not None]
    t0s = sorted({round(t.meta.get("t0", 0.0), 9) for t in runs})
    rep.estimates["t0_grid"] = list(t0s)
    for eps in eps_list:
        for R in R_list:
            taus = {}
            deltas = {}
            for t0 in t0s:
                group = [
                    t for t in runs
                    if abs(t.meta.get("t0", 0.0) - t0) < 1e-9
                    and np.linalg.norm(t.meta.get("x0")) <= R + 1e-12
                ]
                if not group:
                    continue
                taus[t0] = max(_tau_of(t, eps) for t in group)
                radii = sorted({float(np.linalg.norm(t.meta.get("x0"))) for t in group})
                dd = 0.0
                for r in radii:
                    sub = [t for t in group if np.linalg.norm(t.meta.get("x0")) <= r + 1e-12]
                    if all(_y_sup(t) <= eps for t in sub):
                        dd = r
                deltas[t0] = dd
            rep.estimates[f"tau_by_t0(eps={eps},R={R})"] = taus
            rep.estimates[f"delta_by_t0(eps={eps},R={R})"] = deltas
            tau_vals = [v for v in taus.values() if v > 0]
            if tau_vals:
                ratio = max(tau_vals) / max(min(tau_vals), 1e-12)
                rep.findings.append(
                    Finding("URGAOS-tau-uniformity", f"eps={eps},R={R}",
                            ratio <= degrade or min(tau_vals) < 1.0, ratio,
                            note=f"worst/best settling ratio across t0 (flag at {degrade}x)")
                )
            d_vals = [v for v in deltas.values() if v > 0]
            if len(d_vals) >= 2:
                ratio = max(d_vals) / max(min(d_vals), 1e-12)
                rep.findings.append(
                    Finding("URGAOS-delta-uniformity", f"eps={eps},R={R}",
                            ratio <= degrade, ratio)
                )
    return rep


def gamma_sum_closed_form() -> float:
    """Sum of 18 exp(-2j) over j >= 0."""
    return 18.0 / (1.0 - math.exp(-2.0))


def default_gamma(t: float) -> float:
    return 18.0 * math.exp(-t)


def check_lemma34(batch: Sequence, cert: Certificate, pair: InterleavePair,
                  gamma_fn: Callable[[float], float] = default_gamma,
                  a_factor: float = 9.0, slack: float = 1e-6) -> StabilityReport:
    """Two sampled hypotheses behind the non-uniform stability conclusion.

    Window bound: sup of V over [a, a+2] <= a_factor V(a) + gamma(a), at the
    start time and every even integer.  Step bound: V(2j+2) <= V(2j) -
    rho_tilde(V(2j)) + gamma(2j).  Also confirms the summability of gamma
    over even integers against the closed form.
    """
    rep = StabilityReport("Lemma34", tested_class=_classes(batch))
    for traj in batch:
        if traj is None:
            continue
        t0 = traj.unit_t0
        anchors = [t0]
        j = math.ceil(t0 / 2.0)
        while 2 * j + 2 <= traj.t[-1] + 1e-9:
            anchors.append(2.0 * j)
            j += 1
        worst_w = math.inf
        worst_s = math.inf
        wit_w = wit_s = None
        for a in anchors:
            va = traj.value_at(a)
            if va is None:
                continue
            sup_w = traj.window_v_max(a, a + 2.0)
            bound = a_factor * va + gamma_fn(a)
            mw = (bound - sup_w) / max(1.0, bound) + slack
            if mw < worst_w:
                worst_w, wit_w = mw, {"anchor": a, "sup": sup_w, "bound": bound}
            if a == t0 and abs(a - round(a / 2) * 2) > 1e-9:
                continue
            v_next = traj.value_at(a + 2.0)
            if v_next is None or abs(a - round(a / 2) * 2) > 1e-9:
                continue
            bnd = va - rho_tilde(pair, va) + gamma_fn(a)
            ms = (bnd - v_next) / max(1.0, bnd) + slack
            if ms < worst_s:
                worst_s, wit_s = ms, {"anchor": a, "v_next": v_next, "bound": bnd}
        w = _witness(traj)
        rep.findings.append(
            Finding("Lemma34-window", "sup V <= a(V)+gamma", worst_w >= 0.0, worst_w,
                    {**w, **(wit_w or {})} if worst_w < 0 else None)
        )
        rep.findings.append(
            Finding("Lemma34-step", "V(2j+2) <= V(2j)-rho~+gamma", worst_s >= 0.0, worst_s,
                    {**w, **(wit_s or {})} if worst_s < 0 else None)
        )
    # summability of the leak sequence
    total = 0.0
    j = 0
    while True:
        term = gamma_fn(2.0 * j)
        total += term
        j += 1
        if term < 1e-18 or j > 10000:
            break
    closed = gamma_sum_closed_form()
    rep.estimates["gamma_sum"] = total
    rep.estimates["gamma_sum_closed_form"] = closed
    rep.findings.append(
        Finding("Lemma34-gamma-sum", "sum gamma(2j)", abs(total - closed) <= 1e-9,
                abs(total - closed))
    )
    # the settling landmark of the conclusion: a^{-1}(a1(eps)/2) at eps = 1e-2
    eps = 1e-2
    s_eps = cert.a1(eps) / (2.0 * a_factor)
    rep.estimates["S(1e-2)"] = s_eps
    rep.findings.append(Finding("Lemma34-S", "S(eps) positive", s_eps > 0.0, s_eps))
    return rep


def tau_cap(cert: Certificate, pair: InterleavePair, eps: float, R: float) -> float:
    """Theoretical settling-lag cap: 2 + 18 a2(R) / r."""
    lo = cert.a1(eps) / 9.0
    hi = lo + 9.0 * cert.a2(R)
    ss = np.exp(np.linspace(math.log(max(lo, 1e-300)), math.log(hi), 400))
    r = min(rho_tilde(pair, float(s)) for s in ss)
    if r <= 0.0:
        return math.inf
    return 2.0 + 18.0 * cert.a2(R) / r


def fact2_threshold(cert: Certificate, pair: InterleavePair, eps: float, R: float,
                    t0: float) -> float:
    """Even-step index beyond which V must sit below a1(eps)/9."""
    lo = cert.a1(eps) / 9.0
    hi = lo + 9.0 * cert.a2(R)
    ss = np.exp(np.linspace(math.log(max(lo, 1e-300)), math.log(hi), 400))
    r = min(rho_tilde(pair, float(s)) for s in ss)
    j = math.ceil(t0 / 2.0)
    return j + 9.0 * cert.a2(R) / max(r, 1e-300)


def fact2_check(batch: Sequence, cert: Certificate, pair: InterleavePair,
                eps: float, R: float) -> StabilityReport:
    """V at even samples beyond the landmark index stays below a1(eps)/9.

    The landmark scales like 1/min(rho_tilde) and typically dwarfs any
    simulated horizon; the check is then vacuous and says so.
    """
    rep = StabilityReport("Fact2", tested_class=_classes(batch))
    cap = cert.a1(eps) / 9.0
    applicable = 0
    worst = math.inf
    wit = None
    for traj in batch:
        if traj is None or float(np.linalg.norm(traj.meta.get("x0"))) > R + 1e-12:
            continue
        thr = fact2_threshold(cert, pair, eps, R, traj.meta.get("t0", 0.0))
        i = math.ceil(thr)
        while 2 * i <= traj.t[-1] + 1e-9:
            v = traj.value_at(2.0 * i)
            if v is not None:
                applicable += 1
                margin = (cap - v) / max(cap, 1e-300)
                if margin < worst:
                    worst, wit = margin, {**_witness(traj), "i": i, "V": v}
            i += 1
    rep.estimates["applicable_indices"] = applicable
    if applicable == 0:
        rep.findings.append(
            Finding("Fact2", f"eps={eps},R={R}", True, math.inf,
                    note="vacuous: landmark index beyond every simulated horizon")
        )
    else:
        rep.findings.append(
            Finding("Fact2", f"eps={eps},R={R}", worst >= 0.0, worst, wit)
        )
    return rep
