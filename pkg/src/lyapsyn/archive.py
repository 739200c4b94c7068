"""Versioned on-disk archive for synthesis products.

A single JSON document carries the schedule pair, the eagerly built band
grid entries, law metadata, decrease-function samples, and seeds; its
payload checksum guards against tampering.  Loading rebuilds the feedback
banks lazily from the same seeds, so an archived law reproduces the exact
synthesis on any later run.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from typing import Optional, Tuple

import numpy as np

from .config import RunConfig
from .interleave import InterleavePair, make_pair, rho_tilde
from .model import ConfigurationError
from .scheduler import BankConfig, FeedbackBank, default_schedule
from .stabilize import (
    FeedbackLaw,
    feedback_deadzone,
    feedback_uniform,
    raw_interleave_law,
    raw_scheduler_law,
)

__all__ = ["ArchiveError", "synthesize", "save_archive", "load_archive", "archive_digest"]

FORMAT_VERSION = 1


class ArchiveError(RuntimeError):
    pass


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def synthesize(cfg: RunConfig) -> Tuple[FeedbackLaw, dict]:
    """Build the configured law and the archive payload describing it."""
    model, cert = cfg.build_system()
    bank_cfg = BankConfig(seed=cfg.seed)

    payload = {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "system": cfg.system_name if cfg.inline_system is None else {"inline": cfg.inline_system},
        "law": cfg.law_kind,
        "window": list(cfg.window),
    }

    if cfg.law_kind == "raw_scheduler":
        sched = default_schedule(cfg.window)
        bank = FeedbackBank(model, cert, sched, bank_cfg)
        law = raw_scheduler_law(model, cert, bank)
        banks = [bank]
        payload["schedules"] = [_sched_dict(sched)]
    else:
        pair = make_pair(model, cert, cfg.window)
        bank = FeedbackBank(model, cert, pair.sched, bank_cfg)
        bank_s = FeedbackBank(model, cert, pair.sched_shift, bank_cfg)
        banks = [bank, bank_s]
        if cfg.law_kind == "uniform":
            law = feedback_uniform(model, cert, pair, bank, bank_s)
        elif cfg.law_kind == "deadzone":
            law = feedback_deadzone(model, cert, pair, bank, bank_s)
        else:
            law = raw_interleave_law(model, cert, pair, bank, bank_s)
        payload["schedules"] = [_sched_dict(pair.sched), _sched_dict(pair.sched_shift)]
        lo = pair.sched.r(pair.sched.i_min)
        hi = pair.sched.r(pair.sched.i_max)
        ss = np.exp(np.linspace(math.log(lo), math.log(hi), 64))
        payload["rho_tilde_samples"] = [[float(s), rho_tilde(pair, float(s))] for s in ss]

    # eagerly built band-grid entries for the configured window
    eager = {}
    for bi, bk in enumerate(banks):
        for i in cfg.eager_bands:
            for j in cfg.eager_units:
                if not (bk.sched.i_min < i <= bk.sched.i_max):
                    continue
                _, data = bk.ensure(i, j)
                eager[f"{bi}:{i}:{j}"] = {
                    "N": data.N, "delta": data.delta, "mu": data.mu,
                    "rho_i": data.rho_i, "u_cap": data.u_cap, "level": data.level,
                    "cells": bk.tables[(i, j)].size,
                }
    payload["eager_bands"] = eager
    return law, payload


def _sched_dict(s) -> dict:
    return {
        "i_min": s.i_min, "i_max": s.i_max, "tag": s.tag,
        "r": list(s.r_vals), "a": list(s.a_vals),
    }


def save_archive(path: str, payload: dict) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    body = _canonical(payload)
    digest = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w") as fh:
        json.dump({"payload": payload, "sha256": digest}, fh, sort_keys=True, indent=1)
    return digest


def archive_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_archive(path: str, cfg: RunConfig) -> Tuple[FeedbackLaw, dict]:
    """Rebuild the archived law; payload checksum mismatches are errors."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"cannot read archive {path!r}: {exc}")
    payload = doc.get("payload")
    want = doc.get("sha256")
    if payload is None or want is None:
        raise ArchiveError("archive missing payload or checksum")
    got = hashlib.sha256(_canonical(payload).encode()).hexdigest()
    if got != want:
        raise ArchiveError("archive checksum mismatch (corrupted or edited)")
    if payload.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive version {payload.get('format_version')}")
    if payload.get("law") != cfg.law_kind or list(cfg.window) != payload.get("window"):
        raise ArchiveError("archive does not match the configured law/window")
    law, fresh = synthesize(cfg)
    # spot-check determinism of the rebuilt band entries
    for key, entry in payload.get("eager_bands", {}).items():
        if key in fresh.get("eager_bands", {}):
            if fresh["eager_bands"][key] != entry:
                raise ArchiveError(f"band entry {key} does not reproduce; seeds differ?")
    return law, payload
