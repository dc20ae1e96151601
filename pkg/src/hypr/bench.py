"""Timing/memory harness comparing the window engine against the
step-by-step eligibility reference on identical networks and inputs.

Emits JSON-lines rows with a stable, versioned schema; peak bytes come
from the engine's allocation ledger, not process RSS, so the
constant-memory property is an exact equality across sequence lengths.
"""

from __future__ import annotations

import json
import time

import numpy as np

from .engine import HyprEngine
from .losses import LossSpec
from .network import LayerSpec, NetworkConfig, init_params
from .neurons import ModelKind
from .oracles import eprop_reference

BENCH_SCHEMA = 1


def bench_cell(
    model: str = "brf",
    m: int = 128,
    d: int = 15,
    total_steps: int = 1024,
    lam: int = 512,
    workers: int = 1,
    batch: int = 16,
    classes: int = 2,
    seed: int = 0,
    with_reference: bool = True,
) -> dict:
    """One benchmark cell: time per batch for both paths, peak bytes."""
    cfg = NetworkConfig(
        input_dim=d, hidden=[LayerSpec(ModelKind(model), m)], classes=classes,
        seed=seed,
    )
    params = init_params(cfg)
    rng = np.random.default_rng(seed + 1)
    x = (rng.random((batch, total_steps, d)) < 0.1).astype(np.float64)
    targets = rng.integers(0, classes, size=batch)
    spec = LossSpec(n_classes=classes)
    eng = HyprEngine(params, lam=lam, batch=batch, loss_spec=spec, workers=workers)
    eng.train_sequence(params, x[:, : min(lam, total_steps)], targets)  # warm kernels
    t_start = time.perf_counter()
    eng.train_sequence(params, x, targets)
    hypr_ms = (time.perf_counter() - t_start) * 1e3
    row = {
        "schema": BENCH_SCHEMA,
        "model": str(ModelKind(model).value),
        "m": m,
        "d": d,
        "T": total_steps,
        "lam": lam,
        "workers": workers,
        "batch": batch,
        "hypr_ms": hypr_ms,
        "peak_bytes": eng.peak_bytes,
    }
    if with_reference:
        t_start = time.perf_counter()
        eprop_reference(params, x, targets, spec)
        eprop_ms = (time.perf_counter() - t_start) * 1e3
        row["eprop_ms"] = eprop_ms
        row["speedup"] = eprop_ms / hypr_ms
    return row


def run_bench(
    t_list,
    lam_list,
    workers_list,
    model: str = "brf",
    m: int = 128,
    d: int = 15,
    batch: int = 16,
    seed: int = 0,
    with_reference: bool = True,
    log=None,
) -> list[dict]:
    """Full benchmark matrix; failures are recorded, not fatal."""
    rows = []
    for total_steps in t_list:
        for lam in lam_list:
            for workers in workers_list:
                try:
                    row = bench_cell(
                        model=model, m=m, d=d, total_steps=total_steps, lam=lam,
                        workers=workers, batch=batch, seed=seed,
                        with_reference=with_reference,
                    )
                except Exception as exc:  # individual cell failure
                    row = {
                        "schema": BENCH_SCHEMA, "model": model, "m": m, "d": d,
                        "T": total_steps, "lam": lam, "workers": workers,
                        "batch": batch, "error": str(exc),
                    }
                rows.append(row)
                if log:
                    log(json.dumps(row, sort_keys=True))
    return rows


def constant_memory_check(rows: list[dict]) -> bool:
    """Peak bytes must be identical across T at fixed (lam, workers, batch)."""
    groups: dict[tuple, set] = {}
    for row in rows:
        if "peak_bytes" not in row:
            continue
        key = (row["lam"], row["workers"], row["batch"], row["m"], row["model"])
        groups.setdefault(key, set()).add(row["peak_bytes"])
    return all(len(peaks) == 1 for peaks in groups.values())
