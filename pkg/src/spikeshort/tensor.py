"""Reverse-mode autodiff over dense numpy tensors.

Define-by-run: every op records its parents and a backward rule on the
output tensor, so the tape is rebuilt on each forward pass. ``backward``
walks the resulting DAG once, in reverse topological order, and adds the
computed adjoints into ``.grad`` (gradients accumulate across calls; use
``zero_grad`` between steps).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InputError

_tape = threading.local()  # per-thread so concurrent nets never share tape state


def grad_enabled() -> bool:
    return getattr(_tape, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (used for inference/evaluation)."""
    prev = grad_enabled()
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


class Tensor:
    """Dense real tensor, optionally a node on the autodiff tape.

    ``values`` and ``grad`` are numpy arrays of the same shape and dtype
    (float64 in test mode, float32 for training). ``grad`` is allocated
    lazily for intermediates; tensors created with ``requires_grad=True``
    start with an all-zero grad.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None, _op=""):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        if _parents and not grad_enabled():
            _parents, _backward = (), None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.values.size != 1:
            raise InputError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values with no tape history."""
        return Tensor(self.values.copy())

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def _result(values, parents, backward_fn, op):
    """Wrap an op result; records the tape node only in grad mode."""
    return Tensor(values, _parents=parents, _backward=backward_fn, _op=op)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(t.values.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reachable from ``loss``.

    ``loss`` must be a scalar. Adjoints are computed into a per-call
    buffer, then added into ``.grad``, so repeated calls without
    ``zero_grad`` sum exactly.
    """
    if loss.values.size != 1:
        raise InputError(f"backward requires a scalar loss, got shape {loss.shape}")

    # Iterative reverse topological order over the parent DAG.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    adjoint = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        _accumulate(node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            acc = adjoint.get(id(parent))
            if acc is None:
                adjoint[id(parent)] = pg.astype(parent.values.dtype, copy=False)
            else:
                if not acc.flags.writeable:  # first contribution may be a broadcast view
                    acc = acc.copy()
                    adjoint[id(parent)] = acc
                acc += pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.values + b.values, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    return _result(a.values * s, (a,), lambda g: (g * s,), "scale")


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape
    return _result(
        a.values.sum(), (a,), lambda g: (np.broadcast_to(g, shape),), "sum"
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(
        a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape"
    )


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Repeat along axis 0 (t-major stacking for direct temporal encoding)."""
    n = a.shape[0]
    out = np.concatenate([a.values] * reps, axis=0)
    return _result(
        out,
        (a,),
        lambda g: (g.reshape((reps, n) + a.shape[1:]).sum(axis=0),),
        "tile_rows",
    )


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def backward_fn(g):
        dx = np.zeros_like(a.values)
        dx[start:stop] = g
        return (dx,)

    return _result(a.values[start:stop].copy(), (a,), backward_fn, "slice_rows")


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise InputError("concat_rows: empty list")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result(
        np.concatenate([p.values for p in parts], axis=0),
        tuple(parts),
        backward_fn,
        "concat_rows",
    )


def time_mean(a: Tensor, t: int) -> Tensor:
    """Mean over the leading time blocks of a t-major stacked tensor [t*b, ...]."""
    if a.shape[0] % t != 0:
        raise DimensionError(f"time_mean: leading extent {a.shape[0]} not divisible by T={t}")
    b = a.shape[0] // t
    rest = a.shape[1:]
    out = a.values.reshape((t, b) + rest).mean(axis=0)

    def backward_fn(g):
        return (np.concatenate([g] * t, axis=0) / t,)

    return _result(out, (a,), backward_fn, "time_mean")


# ---------------------------------------------------------------------------
# network layers


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y[i,j] = sum_k x[i,k] * w[j,k] + b[j]."""
    if x.values.ndim != 2 or w.values.ndim != 2:
        raise DimensionError(f"linear: expected 2-d inputs, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: inner dims of x{x.shape} and w{w.shape} disagree")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match w{w.shape}")
    xv, wv = x.values, w.values
    out = xv @ wv.T + b.values

    def backward_fn(g):
        return (g @ wv, g.T @ xv, g.sum(axis=0))

    return _result(out, (x, w, b), backward_fn, "linear")


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, no bias. Kernel extents must be odd."""
    if x.values.ndim != 4 or k.values.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d inputs, got {x.shape} and {k.shape}")
    bsz, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if cin != kcin:
        raise DimensionError(f"conv2d: input channels {x.shape} vs kernel {k.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if (h + 2 * pad - kh) % stride != 0 or (w + 2 * pad - kw) % stride != 0:
        raise ConfigError(
            f"conv2d: non-integral output extent for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv2d: output extent collapses to {ho}x{wo} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )

    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.values
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [b, cin, ho, wo, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        bsz, cin * kh * kw, ho * wo
    )
    kmat = k.values.reshape(cout, cin * kh * kw)
    out = np.matmul(kmat, cols).reshape(bsz, cout, ho, wo)

    def backward_fn(g):
        gmat = g.reshape(bsz, cout, ho * wo)
        dk = np.tensordot(gmat, cols, axes=([0, 2], [0, 2])).reshape(k.shape)
        dcols = np.matmul(kmat.T, gmat).reshape(bsz, cin, kh, kw, ho, wo)
        hp, wp = h + 2 * pad, w + 2 * pad
        dxp = np.zeros((bsz, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return (dx, dk)

    return _result(out, (x, k), backward_fn, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.values.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    _, _, h, w = x.shape
    out = x.values.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w),)

    return _result(out, (x,), backward_fn, "global_avg_pool")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not differentiated)."""

    channels: int
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float64)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float64)


def batch_norm_bt(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel standardization over the merged batch-time axis plus space.

    The caller stacks timesteps into axis 0, so normalizing over axes
    (0, 2, 3) pools statistics across both batch and time. In train mode
    running stats are updated by EMA; eval mode uses them as constants.
    """
    if x.values.ndim != 4:
        raise DimensionError(f"batch_norm_bt: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm_bt: gamma{gamma.shape}/beta{beta.shape} do not match {c} channels"
        )
    axes = (0, 2, 3)
    m = n * h * w
    if training:
        if m < 2:
            raise InputError("batch_norm_bt: train mode needs at least 2 samples per channel")
        mean = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        state.running_mean += state.momentum * (mean.astype(np.float64) - state.running_mean)
        state.running_var += state.momentum * (var.astype(np.float64) - state.running_var)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.values[None, :, None, None] + beta.values[None, :, None, None]

    gv = gamma.values

    def backward_train(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        dxhat = g * gv[None, :, None, None]
        # standard batch-norm gradient with batch statistics in the graph
        dx = (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        ) * inv_std[None, :, None, None]
        return (dx, dgamma, dbeta)

    def backward_eval(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        dx = g * (gv * inv_std)[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _result(
        out, (x, gamma, beta), backward_train if training else backward_eval, "batch_norm_bt"
    )


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.values.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {n}"
        )
    if labels.min() < 0 or labels.max() >= classes:
        raise InputError(
            f"softmax_cross_entropy: label outside [0, {classes}): {labels.min()}..{labels.max()}"
        )
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    logp = z[rows, labels] - np.log(ez.sum(axis=1))
    loss = -logp.mean()

    def backward_fn(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn, "softmax_ce")


def softmax_cross_entropy_value(logits_values: np.ndarray, labels) -> float:
    """Tape-free CE over raw logit values (per-branch metric logging)."""
    z = logits_values - logits_values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(logits_values.shape[0])
    return float(-(z[rows, np.asarray(labels)] - lse).mean())
