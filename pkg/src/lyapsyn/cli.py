"""Command-line pipeline: synthesize -> simulate -> verify, plus sweep.

Exit codes: 0 success, 1 property failure, 2 usage/config error,
3 synthesis failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys

import numpy as np

from .archive import ArchiveError, archive_digest, load_archive, save_archive, synthesize
from .config import ConfigurationError, RunConfig, load_config
from .interleave import make_pair
from .lattice import CellCertificationError
from .minimax import CertificateSearchError
from .model import ConfigurationError as ModelConfigError
from .scheduler import BandGridError, schedule_table
from .sim import DisturbanceStrategy, StepPolicy, batch, read_csv, write_csv
from .stabilize import closed_loop_field
from .verify import check_lemma34, check_rfc, check_rgaos, check_urgaos

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_SYNTH = 0, 1, 2, 3


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_synthesize(args) -> int:
    try:
        cfg = _load(args)
    except (ConfigurationError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        law, payload = synthesize(cfg)
    except (BandGridError, CellCertificationError, CertificateSearchError, ValueError) as exc:
        print(f"synthesis error: {exc}", file=sys.stderr)
        return EXIT_SYNTH
    path = os.path.join(cfg.out_dir, "archive.json")
    digest = save_archive(path, payload)
    print(f"archive {path} sha256={digest}")
    print(f"law kind: {payload['law']}; window {payload['window']}")
    eager = payload.get("eager_bands", {})
    if eager:
        ns = [e["N"] for e in eager.values()]
        print(f"eager bands: {len(eager)}; N range [{min(ns)}, {max(ns)}]")
        print("bank:i:j  N  delta  mu  cells")
        for key, e in sorted(eager.items()):
            print(f"  {key}  {e['N']}  {e['delta']:.4g}  {e['mu']:.6g}  {e['cells']}")
    for s, v in payload.get("rho_tilde_samples", [])[:8]:
        print(f"rho_tilde({s:.4g}) = {v:.6g}")
    if law.bank is not None:
        print(schedule_table(law.bank.sched, law.bank))
    return EXIT_OK


def _strategies(cfg: RunConfig):
    out = []
    for name in cfg.strategies:
        if name == "constant":
            out.append(DisturbanceStrategy("constant"))
        elif name == "piecewise_random":
            for s in range(cfg.n_seeds):
                out.append(DisturbanceStrategy("piecewise_random", seed=s))
        elif name == "vertex_adversarial":
            out.append(DisturbanceStrategy("vertex_adversarial"))
        else:
            raise ConfigurationError(f"unknown strategy {name!r}")
    return out


def cmd_simulate(args) -> int:
    try:
        cfg = _load(args)
        strategies = _strategies(cfg)
    except (ConfigurationError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    path = os.path.join(cfg.out_dir, "archive.json")
    try:
        law, payload = load_archive(path, cfg)
    except ArchiveError as exc:
        print(f"archive error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    field = closed_loop_field(law.model, law)
    policy = StepPolicy(base=cfg.base, subgrid_mult=cfg.subgrid_mult,
                        record=cfg.record, blowup=cfg.blowup, eps_track=cfg.eps_track)
    starts = [(t0, x0) for t0 in cfg.t0_grid for x0 in cfg.x0_grid]
    trajs, failures = batch(field, starts, strategies, cfg.horizon, policy,
                            seed_base=cfg.seed)
    csv_dir = os.path.join(cfg.out_dir, "trajectories")
    os.makedirs(csv_dir, exist_ok=True)
    index = []
    for k, traj in enumerate(trajs):
        if traj is None:
            continue
        name = f"traj_{k:04d}.csv"
        write_csv(traj, os.path.join(csv_dir, name))
        index.append({
            "file": name,
            "t0": traj.meta["t0"],
            "x0": traj.meta["x0"],
            "seed": traj.meta["seed"],
            "strategy": traj.meta["strategy"],
            "truncated": traj.truncated,
            "unit_v_max": traj.unit_v_max.tolist(),
            "unit_y_max": traj.unit_y_max.tolist(),
            "last_y_exceed": None if traj.last_y_exceed == -math.inf else traj.last_y_exceed,
        })
    with open(os.path.join(csv_dir, "index.json"), "w") as fh:
        json.dump({"archive_sha256": archive_digest(path), "runs": index,
                   "failures": [list(f) for f in failures]}, fh, sort_keys=True, indent=1)
    print(f"{len(index)} trajectories -> {csv_dir} ({len(failures)} failures)")
    return EXIT_OK


def _load_batch(csv_dir):
    with open(os.path.join(csv_dir, "index.json")) as fh:
        index = json.load(fh)
    trajs = []
    for entry in index["runs"]:
        traj = read_csv(os.path.join(csv_dir, entry["file"]))
        traj.meta.update({
            "t0": entry["t0"], "x0": entry["x0"], "seed": entry["seed"],
            "strategy": entry["strategy"],
        })
        traj.truncated = entry["truncated"]
        traj.unit_v_max = np.asarray(entry["unit_v_max"])
        traj.unit_y_max = np.asarray(entry["unit_y_max"])
        traj.last_y_exceed = entry["last_y_exceed"] if entry["last_y_exceed"] is not None else -math.inf
        trajs.append(traj)
    return trajs


def cmd_verify(args) -> int:
    try:
        cfg = _load(args)
    except (ConfigurationError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    csv_dir = os.path.join(cfg.out_dir, "trajectories")
    if not os.path.isdir(csv_dir):
        print(f"missing trajectory directory {csv_dir}", file=sys.stderr)
        return EXIT_USAGE
    trajs = _load_batch(csv_dir)
    model, cert = cfg.build_system()

    reports = []
    for check in cfg.checks:
        if check == "rfc":
            reports.append(check_rfc(trajs))
        elif check == "rgaos":
            reports.append(check_rgaos(trajs, cfg.eps_list, cfg.T_list, cfg.R_list))
        elif check == "urgaos":
            reports.append(check_urgaos(trajs, cfg.eps_list, cfg.R_list))
        elif check == "lemma34":
            pair = make_pair(model, cert, cfg.window)
            reports.append(check_lemma34(trajs, cert, pair))
        else:
            print(f"config error: unknown check {check!r}", file=sys.stderr)
            return EXIT_USAGE

    os.makedirs(cfg.out_dir, exist_ok=True)
    text = "\n\n".join(r.to_text() for r in reports) if reports else "# no checks enabled"
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    with open(os.path.join(cfg.out_dir, "report.json"), "w") as fh:
        json.dump([r.to_json() for r in reports], fh, sort_keys=True, indent=1)
    print(text)
    if not reports:
        print("no checks enabled")
        return EXIT_OK
    return EXIT_OK if all(r.passed for r in reports) else EXIT_PROPERTY


def cmd_sweep(args) -> int:
    try:
        cfg = _load(args)
    except (ConfigurationError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sweep = cfg.raw.get("sweep", {})
    if not sweep:
        print("config error: no [sweep] section", file=sys.stderr)
        return EXIT_USAGE
    keys = sorted(sweep)
    values = [sweep[k].split(",") for k in keys]
    worst = EXIT_OK
    for combo in itertools.product(*values):
        sub = argparse.Namespace(config=args.config, out=None, seed=args.seed)
        cfg_k = _load(sub)
        label = []
        for key, val in zip(keys, combo):
            section, _, option = key.partition(".")
            cfg_k.raw.setdefault(section, {})[option] = val.strip()
            if key == "run.seed":
                cfg_k.seed = int(val)
            label.append(f"{option}={val.strip()}")
        cfg_k.out_dir = os.path.join(cfg.out_dir, "sweep_" + "_".join(label))
        print(f"== sweep {label}")
        ns = argparse.Namespace(config=args.config, out=cfg_k.out_dir, seed=cfg_k.seed)
        code = cmd_synthesize(ns)
        if code == EXIT_OK:
            code = cmd_simulate(ns)
        if code == EXIT_OK:
            code = cmd_verify(ns)
        worst = max(worst, code)
    return worst


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lyapsyn",
                                 description="feedback synthesis and closed-loop verification")
    ap.add_argument("--jobs", type=int, default=1, help="batch parallelism (advisory)")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in (("synthesize", cmd_synthesize), ("simulate", cmd_simulate),
                     ("verify", cmd_verify), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=fn)
    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
