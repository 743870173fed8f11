"""Finite-difference oracle for analytic gradients.

``fd_check`` is deliberately independent of the tape: it re-evaluates the
forward function at perturbed inputs and compares central differences
against the gradient one ``backward`` call produced, so a bug in a
backward rule cannot hide itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericError


OP_TOL = 1e-5        # per-op checks, 64-bit
PROXY_NET_TOL = 1e-4  # end-to-end proxy-mode network checks


def fd_check(f, x: T.Tensor, h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic grad of ``f`` at ``x`` and central differences.

    ``f`` must be a deterministic scalar-valued function of ``x``.
    Relative error per coordinate is |analytic - fd| / max(1, |fd|).
    ``max_coords`` caps the number of checked coordinates (seeded uniform
    subsample) so end-to-end network checks stay tractable; None checks all.
    """
    x.zero_grad()
    out = f(x)
    if not np.all(np.isfinite(out.values)):
        raise NumericError("fd_check: non-finite function output")
    T.backward(out)
    analytic = x.grad.copy()

    n = x.values.size
    if max_coords is not None and max_coords < n:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    flat = x.values.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).values.reshape(()))
        flat[i] = orig - h
        fm = float(f(x).values.reshape(()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("fd_check: non-finite function output at perturbed point")
        fd = (fp - fm) / (2.0 * h)
        err = abs(float(analytic.reshape(-1)[i]) - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    worst_seed: int

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def _sq_sum(t: T.Tensor) -> T.Tensor:
    return T.tsum(T.mul(t, t))


def _away_from(values, kinks, margin):
    """Push sampled points out of a margin around non-smooth points."""
    v = values.copy()
    for k in kinks:
        near = np.abs(v - k) < margin
        v[near] = k + np.where(v[near] >= k, margin, -margin)
    return v


def _op_cases(seed: int):
    """One (name, f, x) triple per differentiable op, sized for exhaustive FD."""
    from .neuron import NeuronConfig, SurrogateSpec, lif_unroll, proxy_fire

    rng = np.random.default_rng(seed)
    cases = []

    def rt(*shape, lo=-1.0, hi=1.0):
        return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    # linear, all three arguments
    b_, i_, o_ = rng.integers(2, 6), rng.integers(2, 6), rng.integers(2, 5)
    x, w, b = rt(b_, i_), rt(o_, i_), rt(o_)
    cases.append(("linear/x", lambda v: _sq_sum(T.linear(v, w, b)), x))
    cases.append(("linear/w", lambda v: _sq_sum(T.linear(x, v, b)), w))
    cases.append(("linear/b", lambda v: _sq_sum(T.linear(x, w, v)), b))

    # conv2d: stride 1 padded and stride 2 unpadded (odd input keeps extents integral)
    xc, kc = rt(2, 2, 5, 5), rt(3, 2, 3, 3)
    cases.append(("conv2d/x", lambda v: _sq_sum(T.conv2d(v, kc, 1, 1)), xc))
    cases.append(("conv2d/k", lambda v: _sq_sum(T.conv2d(xc, v, 1, 1)), kc))
    xs, ks = rt(2, 1, 5, 5), rt(2, 1, 3, 3)
    cases.append(("conv2d/stride2", lambda v: _sq_sum(T.conv2d(xs, v, 2, 0)), ks))

    xg = rt(2, 3, 4, 4)
    cases.append(("global_avg_pool", lambda v: _sq_sum(T.global_avg_pool(v)), xg))

    # batch norm, train and eval modes (fresh state per call; the running-stat
    # update is a side effect that does not feed the output)
    xb, gg, bb = rt(4, 3, 2, 2), rt(3, lo=0.5, hi=1.5), rt(3)
    def bn_train(x_, g_, b_):
        return T.batch_norm_bt(x_, g_, b_, T.BatchNormState(3), training=True)
    cases.append(("batch_norm_bt/x", lambda v: _sq_sum(bn_train(v, gg, bb)), xb))
    cases.append(("batch_norm_bt/gamma", lambda v: _sq_sum(bn_train(xb, v, bb)), gg))
    cases.append(("batch_norm_bt/beta", lambda v: _sq_sum(bn_train(xb, gg, v)), bb))
    eval_state = T.BatchNormState(3)
    eval_state.running_mean[:] = rng.normal(size=3)
    eval_state.running_var[:] = rng.uniform(0.5, 2.0, 3)
    cases.append((
        "batch_norm_bt/eval",
        lambda v: _sq_sum(T.batch_norm_bt(v, gg, bb, eval_state, training=False)),
        rt(3, 3, 2, 2),
    ))

    logits = rt(3, 5, lo=-2.0, hi=2.0)
    labels = rng.integers(0, 5, size=3)
    cases.append(("softmax_cross_entropy", lambda v: T.softmax_cross_entropy(v, labels), logits))

    # structural / elementwise plumbing
    a2, b2 = rt(3, 4), rt(3, 4)
    cases.append(("add", lambda v: _sq_sum(T.add(v, b2)), a2))
    cases.append(("mul", lambda v: _sq_sum(T.mul(v, b2)), a2))
    cases.append(("scale", lambda v: _sq_sum(T.scale(v, 1.7)), a2))
    cases.append(("sum", lambda v: T.mul(T.tsum(v), T.tsum(v)), a2))
    cases.append(("reshape", lambda v: _sq_sum(T.reshape(v, (4, 3))), a2))
    tile_w = T.Tensor(rng.uniform(-1, 1, (9, 4)))
    cases.append(("tile_rows", lambda v: _sq_sum(T.mul(T.tile_rows(v, 3), tile_w)), a2))
    cases.append(("slice_rows", lambda v: _sq_sum(T.slice_rows(v, 1, 3)), rt(4, 3)))
    parts_src = rt(6, 2)
    cases.append((
        "concat_rows",
        lambda v: _sq_sum(T.concat_rows([T.slice_rows(v, 0, 2), T.slice_rows(v, 2, 6)])),
        parts_src,
    ))
    tm_w = T.Tensor(rng.uniform(-1, 1, (2, 2)))
    cases.append(("time_mean", lambda v: _sq_sum(T.mul(T.time_mean(v, 3), tm_w)), rt(6, 2)))

    # fire: the hard forward is not FD-checkable, so the surrogate backward is
    # validated against its own antiderivative (proxy forward). A corrupted
    # surrogate formula fails here.
    cfg = NeuronConfig()
    for kind, kinks in (
        ("triangular", (0.0, 1.0, 2.0)),
        ("rectangular", (0.5, 1.5)),
        ("tanh_like", ()),
    ):
        sg = SurrogateSpec(kind=kind)
        u = T.Tensor(
            _away_from(rng.uniform(-0.5, 2.5, size=8), kinks, 1e-3), requires_grad=True
        )
        cases.append((
            f"fire[{kind}]",
            lambda v, sg=sg: T.tsum(proxy_fire(v, cfg, sg)),
            u,
        ))

    # lif_unroll in proxy mode: both gradient paths through four timesteps.
    # The reset/temporal detach flags intentionally drop paths, so those
    # variants are checked algebraically elsewhere, not against FD.
    sg_tri = SurrogateSpec(kind="triangular")
    weights = T.Tensor(rng.uniform(-1, 1, (8, 3)))
    def unroll_loss(v, cfg_):
        per_t = [T.slice_rows(v, i * 2, (i + 1) * 2) for i in range(4)]
        spikes = lif_unroll(per_t, cfg_, sg_tri, fire_fn=proxy_fire)
        return T.tsum(T.mul(T.concat_rows(spikes), weights))
    for tag, cfg_ in (("", NeuronConfig()), ("/if_mode", NeuronConfig(tau=1.0))):
        cases.append((
            f"lif_unroll{tag}",
            lambda v, c=cfg_: unroll_loss(v, c),
            rt(8, 3, lo=0.0, hi=2.0),
        ))
    return cases


def op_checks(seeds: int = 20) -> list[CheckResult]:
    """Exhaustive-coordinate FD over every differentiable op, one case per seed."""
    worst: dict[str, CheckResult] = {}
    for seed in range(seeds):
        for name, f, x in _op_cases(seed):
            err = fd_check(f, x)
            prev = worst.get(name)
            if prev is None or err > prev.worst:
                worst[name] = CheckResult(name, err, OP_TOL, seed)
    return list(worst.values())


def _proxy_net_case(kind: str):
    from .network import NetworkSpec, build_network, combine_outputs, forward_train
    from .config import preset_blocks

    rng = np.random.default_rng(99)
    if kind == "3block":
        spec = NetworkSpec(
            blocks=preset_blocks("small3", 1), classes=3, timesteps=3, mode="shortcut"
        )
        x = rng.uniform(0.0, 1.0, (2, 1, 9, 9))
        labels = rng.integers(0, 3, size=2)
        max_coords = 24
    else:
        spec = NetworkSpec(
            blocks=preset_blocks("deep8", 1), classes=10, timesteps=4, mode="shortcut"
        )
        x = rng.uniform(0.0, 1.0, (1, 1, 17, 17))
        labels = rng.integers(0, 10, size=1)
        max_coords = 6
    net = build_network(spec, seed=5, dtype=np.float64)

    def loss_fn(_):
        trace = forward_train(net, x, proxy=True)
        return T.softmax_cross_entropy(combine_outputs(trace, 0.25), labels)

    return net, loss_fn, max_coords


def proxy_net_checks() -> list[CheckResult]:
    """End-to-end FD through proxy-mode networks, every parameter tensor.

    Coordinates are subsampled per parameter so the deep topology stays
    tractable; the sampled set is seeded and fixed.
    """
    results = []
    for kind in ("3block", "deep8"):
        net, loss_fn, max_coords = _proxy_net_case(kind)
        worst, worst_seed = 0.0, 0
        for idx, (name, p) in enumerate(net.parameters()):
            err = fd_check(loss_fn, p, max_coords=max_coords, seed=idx)
            if err > worst:
                worst, worst_seed = err, idx
        results.append(CheckResult(f"proxy-net[{kind}]", worst, PROXY_NET_TOL, worst_seed))
    return results
