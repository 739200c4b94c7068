"""Run configuration: key/value file with nested sections, expression grammar.

The file format is INI-style with dotted section names.  Plant dynamics and
certificates can name a builtin or be composed inline from a small
arithmetic grammar over the scalar components: operators + - * / ^, the
functions exp/sin/cos/abs/min/max, numbers, and the variables t, s, x1...,
u1..., d1....
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .kfuncs import MonotoneMap
from .model import (
    BoxGrid,
    Certificate,
    ConfigurationError,
    FinitePoints,
    FullSpace,
    NonnegativeCone,
    SymmetricBox,
    SystemModel,
    builtin_system,
)

__all__ = ["parse_expression", "RunConfig", "load_config", "ConfigurationError"]


# ---------------------------------------------------------------------------
# expression grammar

_FUNCS = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg):
        raise ConfigurationError(f"expression error at {self.pos} in {self.text!r}: {msg}")

    def peek(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expr(self):
        node = self.term()
        while True:
            c = self.peek()
            if c == "+":
                self.pos += 1
                rhs = self.term()
                node = ("+", node, rhs)
            elif c == "-":
                self.pos += 1
                rhs = self.term()
                node = ("-", node, rhs)
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            c = self.peek()
            if c == "*":
                self.pos += 1
                node = ("*", node, self.unary())
            elif c == "/":
                self.pos += 1
                node = ("/", node, self.unary())
            else:
                return node

    def unary(self):
        c = self.peek()
        if c == "-":
            self.pos += 1
            return ("neg", self.unary())
        if c == "+":
            self.pos += 1
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == "^":
            self.pos += 1
            return ("^", base, self.unary())
        return base

    def atom(self):
        c = self.peek()
        if c == "(":
            self.pos += 1
            node = self.expr()
            if self.peek() != ")":
                self.error("missing )")
            self.pos += 1
            return node
        if c.isdigit() or c == ".":
            start = self.pos
            while self.pos < len(self.text) and (self.text[self.pos].isdigit()
                                                 or self.text[self.pos] in ".eE"
                                                 or (self.text[self.pos] in "+-"
                                                     and self.text[self.pos - 1] in "eE")):
                self.pos += 1
            try:
                return ("num", float(self.text[start:self.pos]))
            except ValueError:
                self.error("bad number")
        if c.isalpha() or c == "_":
            start = self.pos
            while self.pos < len(self.text) and (self.text[self.pos].isalnum()
                                                 or self.text[self.pos] == "_"):
                self.pos += 1
            name = self.text[start:self.pos]
            if self.peek() == "(":
                if name not in _FUNCS:
                    self.error(f"unknown function {name}")
                self.pos += 1
                args = [self.expr()]
                while self.peek() == ",":
                    self.pos += 1
                    args.append(self.expr())
                if self.peek() != ")":
                    self.error("missing )")
                self.pos += 1
                if name in ("min", "max") and len(args) != 2:
                    self.error(f"{name} takes two arguments")
                if name not in ("min", "max") and len(args) != 1:
                    self.error(f"{name} takes one argument")
                return ("call", name, args)
            return ("var", name)
        self.error("unexpected character")


def _eval_node(node, env):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "var":
        try:
            return env[node[1]]
        except KeyError:
            raise ConfigurationError(f"unknown variable {node[1]!r}")
    if op == "neg":
        return -_eval_node(node[1], env)
    if op == "call":
        vals = [_eval_node(a, env) for a in node[2]]
        return _FUNCS[node[1]](*vals)
    a = _eval_node(node[1], env)
    b = _eval_node(node[2], env)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    if op == "^":
        return a ** b
    raise ConfigurationError(f"bad node {op}")


def parse_expression(text: str) -> Callable[[dict], float]:
    """Compile an expression into a callable over a variable environment."""
    parser = _Parser(text)
    tree = parser.expr()
    if parser.peek() != "":
        parser.error("trailing input")
    return lambda env: _eval_node(tree, env)


def _env_txu(t, x, u=None, d=None):
    env = {"t": t}
    x = np.atleast_1d(np.asarray(x, dtype=float))
    for i in range(x.shape[-1]):
        env[f"x{i + 1}"] = x[..., i]
    if u is not None:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        for i in range(u.shape[-1]):
            env[f"u{i + 1}"] = u[..., i]
    if d is not None:
        d = np.atleast_1d(np.asarray(d, dtype=float))
        for i in range(d.shape[-1]):
            env[f"d{i + 1}"] = d[..., i]
    return env


# ---------------------------------------------------------------------------
# configuration object


def _parse_floats(text: str) -> List[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _parse_vectors(text: str) -> List[List[float]]:
    return [_parse_floats(part) for part in text.split(";") if part.strip()]


def _parse_range(text: str) -> List[int]:
    if ":" in text:
        a, b = text.split(":")
        return list(range(int(a), int(b) + 1))
    return [int(v) for v in text.replace(",", " ").split()]


@dataclass
class RunConfig:
    """Everything one pipeline run needs, with all seeds explicit."""

    system_name: str = "S3"
    inline_system: Optional[dict] = None
    window: tuple = (-40, 8)
    law_kind: str = "deadzone"
    seed: int = 0
    out_dir: str = "out"
    # synthesis summary scope
    eager_bands: List[int] = field(default_factory=lambda: [0, 1])
    eager_units: List[int] = field(default_factory=lambda: [0])
    # simulation
    base: float = 0.5
    subgrid_mult: int = 1
    record: str = "unit"
    blowup: float = 1e30
    eps_track: float = 1e-2
    horizon: float = 10.0
    # batch plan
    t0_grid: List[float] = field(default_factory=lambda: [0.0])
    x0_grid: List[List[float]] = field(default_factory=lambda: [[1.0]])
    strategies: List[str] = field(default_factory=lambda: ["constant"])
    n_seeds: int = 1
    # verification
    checks: List[str] = field(default_factory=lambda: ["rfc"])
    eps_list: List[float] = field(default_factory=lambda: [1e-2])
    T_list: List[float] = field(default_factory=lambda: [5.0])
    R_list: List[float] = field(default_factory=lambda: [2.0])
    # minimax grids
    minimax: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def validate(self):
        if self.window[1] < self.window[0]:
            raise ConfigurationError("schedule window is empty (v_ceil < v_floor)")
        if self.law_kind not in ("uniform", "deadzone", "raw_scheduler", "raw_interleave"):
            raise ConfigurationError(f"unknown law kind {self.law_kind!r}")
        if self.record not in ("all", "unit"):
            raise ConfigurationError(f"unknown record mode {self.record!r}")
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be positive")
        return self

    def build_system(self):
        if self.inline_system is None:
            return builtin_system(self.system_name)
        return build_inline_system(self.inline_system)


def load_config(path: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = cp.read(path)
    if not read:
        raise ConfigurationError(f"cannot read config file {path!r}")
    cfg = RunConfig()
    raw = {s: dict(cp[s]) for s in cp.sections()}
    cfg.raw = raw

    run = raw.get("run", {})
    cfg.seed = int(run.get("seed", 0))
    cfg.out_dir = run.get("out", "out")

    system = raw.get("system", {})
    if "builtin" in system:
        cfg.system_name = system["builtin"]
    elif "system.dynamics" in raw:
        cfg.inline_system = {
            "dynamics": raw["system.dynamics"],
            "certificate": raw.get("certificate", {}),
        }
    sched = raw.get("schedule", {})
    cfg.window = (int(sched.get("i_min", -40)), int(sched.get("i_max", 8)))

    law = raw.get("law", {})
    cfg.law_kind = law.get("kind", "deadzone")

    synth = raw.get("synthesize", {})
    cfg.eager_bands = _parse_range(synth.get("bands", "0:1"))
    cfg.eager_units = _parse_range(synth.get("units", "0:0"))

    sim = raw.get("sim", {})
    cfg.base = float(sim.get("base", 0.5))
    cfg.subgrid_mult = int(sim.get("subgrid_mult", 1))
    cfg.record = sim.get("record", "unit")
    cfg.blowup = float(sim.get("blowup", 1e30))
    cfg.eps_track = float(sim.get("eps_track", 1e-2))
    cfg.horizon = float(sim.get("horizon", 10.0))

    bat = raw.get("batch", {})
    cfg.t0_grid = _parse_floats(bat.get("t0", "0"))
    cfg.x0_grid = _parse_vectors(bat.get("x0", "1"))
    cfg.strategies = [s.strip() for s in bat.get("strategies", "constant").split(",")]
    cfg.n_seeds = int(bat.get("seeds", 1))

    ver = raw.get("verify", {})
    cfg.checks = [s.strip() for s in ver.get("checks", "rfc").split(",") if s.strip()]
    cfg.eps_list = _parse_floats(ver.get("eps", "0.01"))
    cfg.T_list = _parse_floats(ver.get("t", ver.get("T", "5")))
    cfg.R_list = _parse_floats(ver.get("r", ver.get("R", "2")))

    cfg.minimax = {k: float(v) for k, v in raw.get("minimax", {}).items()}
    return cfg.validate()


# ---------------------------------------------------------------------------
# inline systems


def _monotone_from_expr(text: str) -> MonotoneMap:
    fn = parse_expression(text)
    return MonotoneMap(lambda s: float(fn({"s": s})), label=text)


def build_inline_system(spec: dict):
    """Assemble (SystemModel, Certificate) from expression definitions."""
    dyn = spec["dynamics"]
    n = int(dyn.get("n", 1))
    m = int(dyn.get("m", 1))
    l = int(dyn.get("l", 1))
    k = int(dyn.get("k", 1))
    f_nodes = [parse_expression(dyn[f"f{i + 1}"]) for i in range(n)]
    h_nodes = [parse_expression(dyn[f"h{i + 1}"]) for i in range(k)]

    def f(t, d, x, u):
        env = _env_txu(t, x, u, d)
        # the additive zero forces constant expressions to broadcast
        return np.stack([g(env) + 0.0 * env["x1"] for g in f_nodes], axis=-1)

    def H(t, x):
        env = _env_txu(t, x)
        return np.stack([g(env) + 0.0 * env["x1"] for g in h_nodes], axis=-1)

    d_kind = dyn.get("d_kind", "points")
    if d_kind == "box":
        lo = _parse_floats(dyn.get("d_lo", "0"))
        hi = _parse_floats(dyn.get("d_hi", "0"))
        D = BoxGrid(tuple(lo), tuple(hi), int(dyn.get("d_grid", 5)))
    else:
        pts = _parse_vectors(dyn.get("d_points", "0"))
        D = FinitePoints(tuple(tuple(p) for p in pts))

    u_kind = dyn.get("u_kind", "full")
    if u_kind == "full":
        U = FullSpace(m)
    elif u_kind == "nonneg":
        U = NonnegativeCone(m)
    elif u_kind == "box":
        U = SymmetricBox(tuple(_parse_floats(dyn.get("u_radii", "1"))))
    else:
        raise ConfigurationError(f"unknown control cone {u_kind!r}")

    model = SystemModel(
        name=dyn.get("name", "inline"), n=n, m=m, l=l, k=k,
        f=f, H=H, D=D, U=U, vectorized=False, fast_id=-1,
    )

    cs = spec.get("certificate", {})
    if not cs:
        raise ConfigurationError("inline system needs a [certificate] section")
    v_fn = parse_expression(cs["v"])
    rho_fn = parse_expression(cs.get("rho", "s"))
    b_fn = parse_expression(cs.get("b", "1"))
    mu_fn = parse_expression(cs.get("mu", "1"))
    beta_fn = parse_expression(cs.get("beta", "1"))

    def V(t, x):
        return float(v_fn(_env_txu(t, x)))

    def b(t, x):
        return float(b_fn(_env_txu(t, x)))

    cert = Certificate(
        V=V,
        a1=_monotone_from_expr(cs.get("a1", "0.125*s^2")),
        a2=_monotone_from_expr(cs.get("a2", "s^2")),
        mu=lambda t: float(mu_fn({"t": t})),
        beta=lambda t: float(beta_fn({"t": t})),
        rho=lambda s: float(rho_fn({"s": s})),
        b=b,
    )
    return model, cert
