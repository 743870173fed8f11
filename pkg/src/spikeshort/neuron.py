"""Leaky integrate-and-fire dynamics with pluggable surrogate gradients.

The membrane update over discrete timesteps is

    u_pre(t+1) = tau * u(t) + c(t+1)
    o(t+1)     = 1 if u_pre(t+1) > v_th else 0
    u(t+1)     = u_pre(t+1) * (1 - o(t+1))

The firing step is non-differentiable, so the backward pass substitutes a
bounded surrogate derivative. ``proxy_fire`` replaces the hard forward
with the surrogate's antiderivative, turning the whole network into a
genuinely differentiable function for end-to-end finite-difference
validation of the backward plumbing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError

SURROGATE_KINDS = ("triangular", "rectangular", "tanh_like")


@dataclass(frozen=True)
class NeuronConfig:
    """LIF constants. tau=1 degenerates to the integrate-and-fire neuron."""

    tau: float = 0.5
    v_th: float = 1.0
    reset_grad: bool = True       # differentiate the (1 - o) reset factor
    detach_temporal: bool = False  # cut the membrane path between timesteps

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.v_th <= 0.0:
            raise ConfigError(f"v_th must be positive, got {self.v_th}")


@dataclass(frozen=True)
class SurrogateSpec:
    """Which surrogate derivative backs the fire op.

    Exactly the parameter matching ``kind`` is consulted:
    gamma (triangular height), a (rectangular width), k (tanh-like scale).
    """

    kind: str = "triangular"
    gamma: float = 1.0
    a: float = 1.0
    k: float = 1.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ConfigError(f"unknown surrogate kind {self.kind!r}")
        if self.kind == "rectangular" and self.a <= 0.0:
            raise ConfigError(f"rectangular width a must be positive, got {self.a}")

    def to_json(self) -> dict:
        param = {"triangular": "gamma", "rectangular": "a", "tanh_like": "k"}[self.kind]
        return {"kind": self.kind, param: getattr(self, param)}

    @classmethod
    def from_json(cls, obj: dict) -> "SurrogateSpec":
        kind = obj.get("kind")
        if kind not in SURROGATE_KINDS:
            raise ConfigError(f"unknown surrogate kind {kind!r}")
        param = {"triangular": "gamma", "rectangular": "a", "tanh_like": "k"}[kind]
        extras = set(obj) - {"kind", param}
        if extras:
            raise ConfigError(f"unexpected surrogate keys {sorted(extras)} for kind {kind!r}")
        kwargs = {param: float(obj[param])} if param in obj else {}
        return cls(kind=kind, **kwargs)


@dataclass
class MembraneState:
    """Potentials of one neuron population at one timestep."""

    u_pre: T.Tensor
    u: T.Tensor
    t: int = 0


def surrogate_grad_values(u_pre: np.ndarray, cfg: NeuronConfig, sg: SurrogateSpec) -> np.ndarray:
    """Elementwise surrogate derivative of the firing step, on raw arrays."""
    v = cfg.v_th
    if sg.kind == "triangular":
        return sg.gamma * np.maximum(0.0, 1.0 - np.abs(u_pre / v - 1.0))
    if sg.kind == "rectangular":
        return (np.abs(u_pre - v) < sg.a / 2.0).astype(u_pre.dtype) / sg.a
    th = np.tanh(u_pre - v)
    return sg.k * (1.0 - th) ** 2


def surrogate_grad(u_pre: T.Tensor, cfg: NeuronConfig, sg: SurrogateSpec) -> T.Tensor:
    return T.Tensor(surrogate_grad_values(u_pre.values, cfg, sg))


def proxy_fire_values(u_pre: np.ndarray, cfg: NeuronConfig, sg: SurrogateSpec) -> np.ndarray:
    """Closed-form antiderivative of the surrogate, the smooth stand-in forward.

    Triangular and rectangular are normalized to 0 below their support
    (so proxy_fire(v_th - large) = 0). The tanh-like surrogate has a
    nonzero left tail, so its antiderivative is unbounded below; it is
    anchored at proxy_fire(v_th) = 0 instead, which leaves gradients
    untouched.
    """
    v = cfg.v_th
    if sg.kind == "triangular":
        u = np.clip(u_pre, 0.0, 2.0 * v)
        left = u * u / (2.0 * v)
        right = -u * u / (2.0 * v) + 2.0 * u - v
        return sg.gamma * np.where(u <= v, left, right)
    if sg.kind == "rectangular":
        lo = v - sg.a / 2.0
        return np.clip((u_pre - lo) / sg.a, 0.0, 1.0)
    z = u_pre - v
    # log cosh z = |z| + log1p(exp(-2|z|)) - log 2, stable for large |z|
    logcosh = np.abs(z) + np.log1p(np.exp(-2.0 * np.abs(z))) - np.log(2.0)
    return sg.k * (2.0 * z - 2.0 * logcosh - np.tanh(z))


def lif_charge(state: MembraneState, c: T.Tensor, cfg: NeuronConfig) -> T.Tensor:
    """u_pre(t+1) = tau * u(t) + c(t+1), recorded on the tape."""
    if state.u.shape != c.shape:
        raise DimensionError(f"lif_charge: state {state.u.shape} vs current {c.shape}")
    u = state.u.detach() if cfg.detach_temporal else state.u
    return T.add(T.scale(u, cfg.tau), c)


def fire(u_pre: T.Tensor, cfg: NeuronConfig, sg: SurrogateSpec) -> T.Tensor:
    """Binary spikes: 1 where u_pre strictly exceeds v_th. Backward uses the surrogate."""
    out = (u_pre.values > cfg.v_th).astype(u_pre.dtype)

    def backward_fn(g):
        return (g * surrogate_grad_values(u_pre.values, cfg, sg),)

    return T._result(out, (u_pre,), backward_fn, "fire")


def proxy_fire(u_pre: T.Tensor, cfg: NeuronConfig, sg: SurrogateSpec) -> T.Tensor:
    """Smooth fire whose true derivative equals the surrogate exactly."""
    out = proxy_fire_values(u_pre.values, cfg, sg)

    def backward_fn(g):
        return (g * surrogate_grad_values(u_pre.values, cfg, sg),)

    return T._result(out, (u_pre,), backward_fn, "proxy_fire")


def lif_reset(u_pre: T.Tensor, o: T.Tensor, cfg: NeuronConfig) -> T.Tensor:
    """u(t+1) = u_pre(t+1) * (1 - o(t+1)).

    With reset_grad the o factor stays in the graph, so the temporal path
    picks up the -u_pre * surrogate(u_pre) product-rule term; otherwise o
    is treated as a constant.
    """
    if u_pre.shape != o.shape:
        raise DimensionError(f"lif_reset: u_pre {u_pre.shape} vs spikes {o.shape}")
    keep = 1.0 - o.values
    out = u_pre.values * keep

    if cfg.reset_grad:
        def backward_fn(g):
            return (g * keep, -g * u_pre.values)
    else:
        def backward_fn(g):
            return (g * keep, None)

    return T._result(out, (u_pre, o), backward_fn, "lif_reset")


def lif_unroll(inputs, cfg: NeuronConfig, sg: SurrogateSpec, fire_fn=None):
    """Run charge -> fire -> reset over T timesteps; returns the T spike tensors.

    The tape spans all timesteps, so backward realizes both the spike-output
    path and the temporal membrane path (unless detach_temporal). The initial
    membrane potential is zero. ``fire_fn`` defaults to ``fire``; pass
    ``proxy_fire`` for the differentiable validation mode.
    """
    inputs = list(inputs)
    if not inputs:
        raise InputError("lif_unroll: empty input list")
    shape = inputs[0].shape
    for c in inputs[1:]:
        if c.shape != shape:
            raise DimensionError(f"lif_unroll: mixed input shapes {shape} vs {c.shape}")
    if fire_fn is None:
        fire_fn = fire

    state = MembraneState(
        u_pre=T.Tensor(np.zeros(shape, dtype=inputs[0].dtype)),
        u=T.Tensor(np.zeros(shape, dtype=inputs[0].dtype)),
        t=0,
    )
    spikes = []
    for t, c in enumerate(inputs, start=1):
        u_pre = lif_charge(state, c, cfg)
        o = fire_fn(u_pre, cfg, sg)
        u = lif_reset(u_pre, o, cfg)
        state = MembraneState(u_pre=u_pre, u=u, t=t)
        spikes.append(o)
    return spikes
