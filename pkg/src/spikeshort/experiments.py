"""Seeded experiment harnesses behind the CLI and the desk-scale studies.

Two reference experiments:
  * vanishing_comparison: paired vanilla/shortcut gradient reports on
    fresh nets, one backward each, across seeds (the gradient-vanishing
    evidence, run at 64-bit).
  * mode_comparison: full training runs across modes and seeds (the
    vanilla / shortcut / evolutionary accuracy ordering).
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, build_datasets, config_hash, effective_dict, parse_config
from .data import batches
from .diagnostics import capture_gradients, export_report, run_pass, write_report_json
from .network import build_network
from .training import train_loop

THREADS_ENV = "SPIKESHORT_THREADS"


def run_training(rc: RunConfig, run_dir: Path) -> dict:
    """One training run into ``run_dir``: config copy, metrics, checkpoints, summary."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as f:
        json.dump(effective_dict(rc), f, indent=2, sort_keys=True)
        f.write("\n")
    train, test = build_datasets(rc)
    net = build_network(rc.network, rc.neuron, rc.surrogate, seed=rc.seed, dtype=np.float32)
    t0 = time.perf_counter()
    records = train_loop(net, train, test, rc.trainer, run_dir=run_dir)
    wall = time.perf_counter() - t0
    epoch_accs = [(r.epoch, r.acc) for r in records if r.acc is not None]
    best_epoch, best_acc = max(epoch_accs, key=lambda t: (t[1], -t[0]))
    summary = {
        "config_hash": config_hash(rc),
        "seed": rc.seed,
        "mode": rc.mode,
        "best_acc": best_acc,
        "best_epoch": best_epoch,
        "final_acc": epoch_accs[-1][1],
        "final_lambda": records[-1].lambda_i,
        "iterations": records[-1].iteration,
        "wall_time_s": wall,
    }
    with open(run_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def _diagnose_seed(rc: RunConfig, train, seed: int, out_dir: Path | None):
    images, labels = next(batches(train, rc.trainer.batch, shuffle_seed=seed))
    row = {"seed": seed}
    for mode, lam in (("vanilla", 0.0), ("shortcut", rc.trainer.lambda0)):
        spec = replace(rc.network, mode=mode)
        net = build_network(spec, rc.neuron, rc.surrogate, seed=seed, dtype=np.float64)
        ctx = run_pass(net, images, labels, lam, seed=seed)
        report = capture_gradients(ctx)
        first = next(s for s in report.layers if s.name == "block1.conv.weight")
        row[f"{mode}_ratio"] = report.ratio_first_last
        row[f"{mode}_near_zero_first"] = first.near_zero_frac
        row[f"{mode}_loss"] = ctx.loss
        if out_dir is not None:
            export_report(report, out_dir / f"seed{seed}_{mode}.json")
    row["ratio_win"] = bool(row["shortcut_ratio"] > row["vanilla_ratio"])
    row["near_zero_win"] = bool(
        row["shortcut_near_zero_first"] < row["vanilla_near_zero_first"]
    )
    return row


def vanishing_comparison(rc: RunConfig, seeds, out_dir: Path | None = None, threads: int | None = None) -> dict:
    """Paired vanilla/shortcut gradient reports per seed, plus a win-count summary.

    Per-seed jobs are independent (fresh nets, thread-confined tapes) and
    may run in parallel; SPIKESHORT_THREADS caps the worker count.
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    train, _ = build_datasets(rc)
    seeds = list(seeds)
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(seeds))) as pool:
            rows = list(pool.map(lambda s: _diagnose_seed(rc, train, s, out_dir), seeds))
    else:
        rows = [_diagnose_seed(rc, train, s, out_dir) for s in seeds]
    summary = {
        "seeds": seeds,
        "lambda": rc.trainer.lambda0,
        "rows": rows,
        "ratio_win_count": sum(r["ratio_win"] for r in rows),
        "near_zero_win_count": sum(r["near_zero_win"] for r in rows),
        "total": len(rows),
    }
    if out_dir is not None:
        write_report_json(summary, out_dir / "summary.json")
    return summary


def mode_comparison(cfg_obj: dict, modes, seeds, out_root) -> dict:
    """Train every (mode, seed) pair from a shared base config; report accuracy means."""
    out_root = Path(out_root)
    rows = []
    for mode in modes:
        for seed in seeds:
            obj = {**cfg_obj, "mode": mode, "seed": int(seed), "out": str(out_root)}
            rc = parse_config(obj)
            run_dir = out_root / f"{config_hash(rc)}-s{seed}"
            summary = run_training(rc, run_dir)
            rows.append(
                {
                    "mode": mode,
                    "seed": int(seed),
                    "final_acc": summary["final_acc"],
                    "best_acc": summary["best_acc"],
                    "wall_time_s": summary["wall_time_s"],
                }
            )
    means = {
        mode: float(np.mean([r["final_acc"] for r in rows if r["mode"] == mode]))
        for mode in modes
    }
    return {"rows": rows, "mean_final_acc": means}
