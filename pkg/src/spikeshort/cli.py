"""Command-line entry point: train, eval, diagnose, gradcheck.

Exit codes: 0 ok, 1 check/validation failure, 2 I/O or format error,
3 numeric abort. Every command is deterministic given config and seed;
run directories are named by config hash plus seed, and an existing
directory is reported as a collision rather than overwritten.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import config_hash, parse_config
from .errors import (
    ConfigError,
    ConsistencyError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    StateError,
)
from .container import read_container
from .network import Network, NetworkSpec
from .training import evaluate


def _apply_overrides(obj: dict, args) -> dict:
    obj = dict(obj)
    if getattr(args, "seed", None) is not None:
        obj["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        obj["out"] = args.out
    if getattr(args, "mode", None) is not None:
        obj["mode"] = args.mode
    if getattr(args, "timesteps", None) is not None:
        net = dict(obj.get("network", {}))
        net["timesteps"] = args.timesteps
        obj["network"] = net
    return obj


def _load_config(args):
    with open(args.config) as f:
        obj = json.load(f)
    return parse_config(_apply_overrides(obj, args))


def cmd_train(args) -> int:
    from .experiments import run_training

    rc = _load_config(args)
    run_dir = Path(rc.out) / f"{config_hash(rc)}-s{rc.seed}"
    if run_dir.exists():
        print(f"error: run directory {run_dir} already exists (collision detected)", file=sys.stderr)
        return 1
    summary = run_training(rc, run_dir)
    print(json.dumps({"run_dir": str(run_dir), **summary}))
    return 0


def cmd_eval(args) -> int:
    """Accuracy of a checkpoint on the config's test split, as one JSON line.

    The network is rebuilt from the config's topology in inference form
    (main path only), so stripped and unstripped checkpoints behave
    identically; parameter shapes are verified against the checkpoint.
    """
    from .config import build_datasets
    from dataclasses import replace

    rc = _load_config(args)
    meta, records = read_container(args.checkpoint)
    if meta.get("kind") != "network":
        raise FormatError(f"{args.checkpoint}: not a network checkpoint")
    net = Network(replace(rc.network, mode="vanilla"), rc.neuron, rc.surrogate, np.float32)
    for name, p in net.params.items():
        if name not in records:
            raise ConfigError(f"{args.checkpoint}: missing parameter {name}")
        if records[name].shape != p.values.shape:
            raise ConfigError(
                f"{args.checkpoint}: shape mismatch for {name}: "
                f"checkpoint {records[name].shape} vs network {p.values.shape}"
            )
        p.values[...] = records[name]
    for key, st in net.bn_states.items():
        st.running_mean[...] = records[f"{key}.running_mean"].astype(np.float64)
        st.running_var[...] = records[f"{key}.running_var"].astype(np.float64)
    net.eval()
    _, test = build_datasets(rc)
    timesteps = args.timesteps or rc.network.timesteps
    acc = evaluate(net, test, timesteps)
    print(json.dumps({"accuracy": acc, "samples": len(test), "timesteps": timesteps}))
    return 0


def cmd_diagnose(args) -> int:
    from .experiments import vanishing_comparison

    rc = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise InputError("diagnose needs at least one seed")
    out_dir = Path(rc.out) / f"{config_hash(rc)}-diagnose"
    if out_dir.exists():
        print(f"error: report directory {out_dir} already exists (collision detected)", file=sys.stderr)
        return 1
    summary = vanishing_comparison(rc, seeds, out_dir=out_dir)
    print(
        json.dumps(
            {
                "out_dir": str(out_dir),
                "ratio_win_count": summary["ratio_win_count"],
                "near_zero_win_count": summary["near_zero_win_count"],
                "total": summary["total"],
            }
        )
    )
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import op_checks, proxy_net_checks

    results = []
    if args.scope in ("op", "all"):
        results += op_checks(seeds=args.seeds)
    if args.scope in ("proxy-net", "all"):
        results += proxy_net_checks()
    failures = []
    for r in sorted(results, key=lambda r: r.name):
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:32s} worst_rel_err={r.worst:.3e} tol={r.tol:.0e} seed={r.worst_seed} {status}")
        if not r.ok:
            failures.append(r)
    if failures:
        names = ", ".join(f"{r.name} (seed {r.worst_seed}, rel err {r.worst:.3e})" for r in failures)
        print(f"FAILED: {names}")
        return 1
    print("all gradient checks passed")
    return 0


def _dispatch(fn, args) -> int:
    try:
        return fn(args)
    except json.JSONDecodeError as e:
        print(f"error: invalid config JSON: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DimensionError, InputError, StateError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, ConsistencyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: numeric abort: {e}", file=sys.stderr)
        return 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="spikeshort",
        description="Train and analyze spiking networks with shortcut branch heads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run config")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--mode", choices=["vanilla", "shortcut", "evolutionary", "uniform-sum"])
        p.add_argument("--timesteps", type=int, help="override timestep count")

    p_train = sub.add_parser("train", help="run the training loop")
    add_common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_diag = sub.add_parser("diagnose", help="paired gradient-vanishing reports")
    add_common(p_diag)
    p_diag.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p_diag.set_defaults(fn=cmd_diagnose)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_gc.add_argument("--scope", choices=["op", "proxy-net", "all"], default="all")
    p_gc.add_argument("--seeds", type=int, default=20, help="random cases per op")
    p_gc.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    return _dispatch(args.fn, args)


if __name__ == "__main__":
    sys.exit(main())
