"""Per-layer gradient statistics: the vanishing-gradient evidence at desk scale.

A report is a snapshot of one backward pass. The headline statistic is
ratio_first_last, the l2 norm of the first trunk conv's weight gradient
over the last trunk conv's; shortcut heads give shallow layers a direct
gradient path, so the ratio rises when they are enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InputError, StateError
from .network import Network, combine_outputs, forward_train

NEAR_ZERO_REL = 1e-6  # fraction of the layer's max |g| counted as "near zero"
DEFAULT_BINS = 101


def histogram(grads, bins: int = DEFAULT_BINS, range_: float | None = None):
    """Uniform bins over [-range, +range]; half-open [lo, hi), extremes clamp to end bins.

    Returns (edges, counts) with len(edges) == bins + 1.
    """
    flat = np.asarray(grads, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise InputError("histogram: empty input")
    if bins < 2:
        raise InputError(f"histogram: bins must be >= 2, got {bins}")
    if range_ is None:
        range_ = float(np.max(np.abs(flat)))
        if range_ == 0.0:
            range_ = 1.0
    elif range_ <= 0:
        raise InputError(f"histogram: range must be positive, got {range_}")
    edges = np.linspace(-range_, range_, bins + 1)
    width = 2.0 * range_ / bins
    idx = np.floor((flat + range_) / width).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    counts = np.bincount(idx, minlength=bins)
    return edges, counts


@dataclass
class GradientStats:
    name: str
    l2_norm: float
    mean_abs: float
    near_zero_frac: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    size: int


@dataclass
class VanishingReport:
    mode: str
    lambda_i: float
    seed: int
    layers: list
    ratio_first_last: float


@dataclass
class PassContext:
    """Marks whether a train-mode forward+backward has completed on the net."""

    net: Network
    mode: str
    lambda_i: float
    seed: int = 0
    backward_done: bool = False
    loss: float | None = None


def run_pass(net: Network, images, labels, lambda_i: float, seed: int = 0, proxy: bool = False) -> PassContext:
    """One train-mode forward+backward; grads are left in place for capture."""
    ctx = PassContext(net=net, mode=net.spec.mode, lambda_i=lambda_i, seed=seed)
    trace = forward_train(net, images, proxy=proxy)
    loss = T.softmax_cross_entropy(combine_outputs(trace, lambda_i), labels)
    net.zero_grad()
    T.backward(loss)
    ctx.loss = loss.item()
    ctx.backward_done = True
    return ctx


def layer_stats(name: str, grad: np.ndarray, near_zero_rel: float = NEAR_ZERO_REL, bins: int = DEFAULT_BINS) -> GradientStats:
    flat = grad.reshape(-1).astype(np.float64)
    peak = float(np.max(np.abs(flat))) if flat.size else 0.0
    if peak == 0.0:
        near = 1.0  # an all-zero layer is entirely near zero
    else:
        near = float((np.abs(flat) < near_zero_rel * peak).mean())
    edges, counts = histogram(flat, bins=bins)
    return GradientStats(
        name=name,
        l2_norm=float(np.linalg.norm(flat)),
        mean_abs=float(np.abs(flat).mean()),
        near_zero_frac=near,
        hist_edges=edges,
        hist_counts=counts,
        size=flat.size,
    )


def capture_gradients(ctx: PassContext, near_zero_rel: float = NEAR_ZERO_REL, bins: int = DEFAULT_BINS) -> VanishingReport:
    """Read every parameter's gradient into stats; grads are not modified."""
    if not ctx.backward_done:
        raise StateError("capture_gradients requires a completed backward pass")
    net = ctx.net
    layers = [
        layer_stats(name, p.grad, near_zero_rel, bins) for name, p in net.parameters()
    ]
    conv_names = [
        f"block{l}.conv.weight" for l in range(1, net.spec.n + 1)
    ]
    by_name = {s.name: s for s in layers}
    first, last = by_name[conv_names[0]], by_name[conv_names[-1]]
    if first is last:
        ratio = 1.0
    elif last.l2_norm == 0.0:
        ratio = 0.0 if first.l2_norm == 0.0 else float("inf")
    else:
        ratio = first.l2_norm / last.l2_norm
    return VanishingReport(
        mode=ctx.mode,
        lambda_i=ctx.lambda_i,
        seed=ctx.seed,
        layers=layers,
        ratio_first_last=ratio,
    )


def report_to_json(report: VanishingReport) -> dict:
    return {
        "mode": report.mode,
        "lambda": report.lambda_i,
        "seed": report.seed,
        "layers": [
            {
                "name": s.name,
                "l2": s.l2_norm,
                "mean_abs": s.mean_abs,
                "near_zero_frac": s.near_zero_frac,
                "hist": {
                    "edges": [float(e) for e in s.hist_edges],
                    "counts": [int(c) for c in s.hist_counts],
                },
            }
            for s in report.layers
        ],
        "ratio_first_last": report.ratio_first_last,
    }


def write_report_json(obj: dict, path):
    """Canonical JSON writer: loading and re-writing a report is byte-identical."""
    import json

    with open(str(path), "w") as f:
        json.dump(obj, f, indent=1)
        f.write("\n")


def export_report(report: VanishingReport, path, format: str = "json"):
    """Write the report; JSON round-trips losslessly (floats via repr)."""
    path = str(path)
    if format == "json":
        write_report_json(report_to_json(report), path)
    elif format == "csv":
        import csv

        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["name", "l2", "mean_abs", "near_zero_frac", "size"])
            for s in report.layers:
                w.writerow([s.name, repr(s.l2_norm), repr(s.mean_abs), repr(s.near_zero_frac), s.size])
    else:
        raise InputError(f"unknown report format {format!r}")
