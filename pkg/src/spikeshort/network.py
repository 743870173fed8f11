"""Spiking conv networks with per-block shortcut classifier heads.

A block is conv -> batch-norm -> LIF (optionally residual: the conv
output and a skipped copy of the block input are summed before the LIF
fires). In shortcut modes every block also feeds a small head (global
average pool over space, mean over timesteps, then a linear classifier);
the last block's head is the main classifier. Side heads exist only
during training and are removed for inference.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ConfigError, InputError, StateError
from .neuron import NeuronConfig, SurrogateSpec, fire, lif_unroll, proxy_fire

MODES = ("vanilla", "shortcut", "evolutionary", "uniform-sum")


@dataclass(frozen=True)
class BlockSpec:
    channels_in: int
    channels_out: int
    stride: int = 1
    residual: bool = False
    kernel: int = 3
    use_bn: bool = True


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple
    classes: int
    timesteps: int
    mode: str = "vanilla"

    @property
    def n(self) -> int:
        return len(self.blocks)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if not self.blocks:
            raise ConfigError("network needs at least one block")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        for l, blk in enumerate(self.blocks, 1):
            if blk.channels_in < 1 or blk.channels_out < 1 or blk.stride < 1:
                raise ConfigError(f"block {l}: bad channels/stride in {blk}")
            if blk.kernel % 2 == 0:
                raise ConfigError(f"block {l}: kernel extent must be odd, got {blk.kernel}")
            if l > 1 and blk.channels_in != self.blocks[l - 2].channels_out:
                raise ConfigError(
                    f"block {l}: channels_in {blk.channels_in} does not match "
                    f"block {l - 1} channels_out {self.blocks[l - 2].channels_out}"
                )
        return self

    def to_json(self) -> dict:
        return {
            "blocks": [
                {
                    "channels_in": b.channels_in,
                    "channels_out": b.channels_out,
                    "stride": b.stride,
                    "residual": b.residual,
                    "kernel": b.kernel,
                    "use_bn": b.use_bn,
                }
                for b in self.blocks
            ],
            "classes": self.classes,
            "timesteps": self.timesteps,
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkSpec":
        blocks = tuple(BlockSpec(**b) for b in obj["blocks"])
        return cls(
            blocks=blocks,
            classes=obj["classes"],
            timesteps=obj["timesteps"],
            mode=obj.get("mode", "vanilla"),
        ).validate()


@dataclass
class ForwardTrace:
    """Per-head logits of one training forward pass, in block order."""

    b: list

    @property
    def main(self) -> T.Tensor:
        return self.b[-1]


class Network:
    """Parameter container; the forward functions below do the work."""

    def __init__(self, spec: NetworkSpec, neuron: NeuronConfig, surrogate: SurrogateSpec, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.neuron = neuron
        self.surrogate = surrogate
        self.dtype = np.dtype(dtype)
        self.training = True
        self.params: dict[str, T.Tensor] = {}
        self.bn_states: dict[str, T.BatchNormState] = {}
        for l, blk in enumerate(spec.blocks, 1):
            kshape = (blk.channels_out, blk.channels_in, blk.kernel, blk.kernel)
            self._add_param(f"block{l}.conv.weight", kshape)
            if blk.residual and (blk.channels_in != blk.channels_out or blk.stride != 1):
                self._add_param(f"block{l}.proj.weight", (blk.channels_out, blk.channels_in, 1, 1))
            if blk.use_bn:
                self._add_param(f"block{l}.bn.gamma", (blk.channels_out,))
                self._add_param(f"block{l}.bn.beta", (blk.channels_out,))
                self.bn_states[f"block{l}.bn"] = T.BatchNormState(blk.channels_out)
        for l in self.head_indices():
            ch = spec.blocks[l - 1].channels_out
            self._add_param(f"head.l{l}.weight", (spec.classes, ch))
            self._add_param(f"head.l{l}.bias", (spec.classes,))

    def _add_param(self, name, shape):
        self.params[name] = T.Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def head_indices(self):
        """Blocks carrying classifier heads (1-based); block n's head is the main one."""
        if self.spec.mode == "vanilla":
            return [self.spec.n]
        return list(range(1, self.spec.n + 1))

    def parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameter_count(self) -> int:
        return sum(p.values.size for p in self.params.values())


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so the presence of head params never shifts trunk init
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def build_network(
    spec: NetworkSpec,
    neuron: NeuronConfig | None = None,
    surrogate: SurrogateSpec | None = None,
    seed: int = 0,
    dtype=np.float32,
) -> Network:
    """Initialize all weights deterministically from the seed.

    Conv and linear weights are fan-in-scaled uniform on
    (-sqrt(1/fan_in), +sqrt(1/fan_in)); BN gamma starts at 1, beta and
    biases at 0.
    """
    net = Network(spec, neuron or NeuronConfig(), surrogate or SurrogateSpec(), dtype)
    for name, p in net.params.items():
        if name.endswith(".bn.gamma"):
            p.values[...] = 1.0
        elif name.endswith(".bn.beta") or name.endswith(".bias"):
            p.values[...] = 0.0
        else:
            shape = p.values.shape
            fan_in = int(np.prod(shape[1:]))
            bound = float(np.sqrt(1.0 / fan_in))
            p.values[...] = _param_rng(seed, name).uniform(-bound, bound, size=shape)
    return net


def _trunk_block(net: Network, l: int, blk: BlockSpec, cur: T.Tensor, t: int, fire_fn):
    """conv -> BN -> (residual add) -> LIF over the t-major stacked tensor."""
    rows, _, h, w = cur.shape
    pad = blk.kernel // 2
    ho = (h + 2 * pad - blk.kernel) // blk.stride + 1
    wo = (w + 2 * pad - blk.kernel) // blk.stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"block {l}: spatial dims collapse to {ho}x{wo}")
    z = T.conv2d(cur, net.params[f"block{l}.conv.weight"], stride=blk.stride, pad=pad)
    if blk.use_bn:
        z = T.batch_norm_bt(
            z,
            net.params[f"block{l}.bn.gamma"],
            net.params[f"block{l}.bn.beta"],
            net.bn_states[f"block{l}.bn"],
            training=net.training,
        )
    if blk.residual:
        proj_name = f"block{l}.proj.weight"
        skip = (
            T.conv2d(cur, net.params[proj_name], stride=blk.stride, pad=0)
            if proj_name in net.params
            else cur
        )
        z = T.add(z, skip)
    batch = rows // t
    per_t = [T.slice_rows(z, i * batch, (i + 1) * batch) for i in range(t)]
    spikes = lif_unroll(per_t, net.neuron, net.surrogate, fire_fn=fire_fn)
    return T.concat_rows(spikes)


def _head_logits(net: Network, l: int, spikes: T.Tensor, t: int) -> T.Tensor:
    pooled = T.global_avg_pool(spikes)          # space
    merged = T.time_mean(pooled, t)             # timesteps
    return T.linear(merged, net.params[f"head.l{l}.weight"], net.params[f"head.l{l}.bias"])


def forward_train(net: Network, x, timesteps: int | None = None, proxy: bool = False) -> ForwardTrace:
    """Run the full training path and record every head's logits.

    The input is direct-encoded: the same image is fed as input current
    at each of the T timesteps (stacked t-major along axis 0 so conv and
    batch-norm see the merged batch-time axis). ``proxy`` swaps the fire
    op for its smooth antiderivative stand-in.
    """
    t = timesteps or net.spec.timesteps
    xt = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=net.dtype))
    cur = T.tile_rows(xt, t)
    fire_fn = proxy_fire if proxy else fire
    heads = set(net.head_indices())
    b = []
    for l, blk in enumerate(net.spec.blocks, 1):
        cur = _trunk_block(net, l, blk, cur, t, fire_fn)
        if l in heads:
            b.append(_head_logits(net, l, cur, t))
    return ForwardTrace(b=b)


def combine_outputs(trace: ForwardTrace, lambda_i: float) -> T.Tensor:
    """o_final = b_n + lambda * sum of side-branch logits.

    lambda = 0 returns the main logits tensor itself, so vanilla-mode and
    forced-zero shortcut losses agree bitwise.
    """
    if lambda_i < 0:
        raise InputError(f"balance coefficient must be >= 0, got {lambda_i}")
    if len(trace.b) == 1 or lambda_i == 0.0:
        return trace.main
    side = trace.b[0]
    for bl in trace.b[1:-1]:
        side = T.add(side, bl)
    return T.add(trace.main, T.scale(side, lambda_i))


def forward_infer(net: Network, x, timesteps: int | None = None) -> np.ndarray:
    """Main-path logits only: no tape, no side heads, BN running stats."""
    if net.training:
        raise StateError("forward_infer requires eval mode (call net.eval() first)")
    t = timesteps or net.spec.timesteps
    with T.no_grad():
        xt = T.Tensor(np.asarray(x, dtype=net.dtype))
        cur = T.tile_rows(xt, t)
        for l, blk in enumerate(net.spec.blocks, 1):
            cur = _trunk_block(net, l, blk, cur, t, fire)
        logits = _head_logits(net, net.spec.n, cur, t)
    return logits.values


def strip_heads(net: Network) -> Network:
    """Copy of the network with side heads removed (main path + main head only)."""
    stripped = Network(
        replace(net.spec, mode="vanilla"), net.neuron, net.surrogate, net.dtype
    )
    stripped.training = net.training
    for name, p in stripped.params.items():
        p.values[...] = net.params[name].values
    for key, st in stripped.bn_states.items():
        st.running_mean[...] = net.bn_states[key].running_mean
        st.running_var[...] = net.bn_states[key].running_var
    return stripped


# ---------------------------------------------------------------------------
# checkpoints

_HEAD_PREFIX = "head.l"


def _side_head_record(name: str, n: int) -> bool:
    if not name.startswith(_HEAD_PREFIX):
        return False
    idx = name[len(_HEAD_PREFIX):].split(".", 1)[0]
    return idx.isdigit() and int(idx) < n


def save_checkpoint(net: Network, path):
    meta = {
        "kind": "network",
        "spec": net.spec.to_json(),
        "neuron": {
            "tau": net.neuron.tau,
            "v_th": net.neuron.v_th,
            "reset_grad": net.neuron.reset_grad,
            "detach_temporal": net.neuron.detach_temporal,
        },
        "surrogate": net.surrogate.to_json(),
    }
    records = [(name, p.values) for name, p in net.params.items()]
    for key, st in net.bn_states.items():
        records.append((f"{key}.running_mean", st.running_mean))
        records.append((f"{key}.running_var", st.running_var))
    write_container(path, meta, records)


def load_checkpoint(path, dtype=np.float32) -> Network:
    meta, records = read_container(path)
    if meta.get("kind") != "network":
        raise ConfigError(f"{path}: container holds {meta.get('kind')!r}, not a network")
    spec = NetworkSpec.from_json(meta["spec"])
    neuron = NeuronConfig(**meta["neuron"])
    surrogate = SurrogateSpec.from_json(meta["surrogate"])
    net = Network(spec, neuron, surrogate, dtype)
    for name, p in net.params.items():
        if name not in records:
            raise ConfigError(f"{path}: checkpoint is missing parameter {name}")
        if records[name].shape != p.values.shape:
            raise ConfigError(
                f"{path}: shape mismatch for {name}: checkpoint "
                f"{records[name].shape} vs network {p.values.shape}"
            )
        p.values[...] = records[name].astype(net.dtype)
    for key, st in net.bn_states.items():
        st.running_mean[...] = records[f"{key}.running_mean"].astype(np.float64)
        st.running_var[...] = records[f"{key}.running_var"].astype(np.float64)
    return net


def strip_checkpoint(src, dst):
    """Rewrite a checkpoint without side-head records (inference form)."""
    meta, records = read_container(src)
    if meta.get("kind") != "network":
        raise ConfigError(f"{src}: container holds {meta.get('kind')!r}, not a network")
    n = len(meta["spec"]["blocks"])
    meta["spec"]["mode"] = "vanilla"
    kept = [(k, v) for k, v in records.items() if not _side_head_record(k, n)]
    write_container(dst, meta, kept)


# ---------------------------------------------------------------------------
# cost accounting

def _spatial_chain(spec: NetworkSpec, h: int, w: int):
    dims = []
    for blk in spec.blocks:
        pad = blk.kernel // 2
        h = (h + 2 * pad - blk.kernel) // blk.stride + 1
        w = (w + 2 * pad - blk.kernel) // blk.stride + 1
        dims.append((h, w))
    return dims


def inference_report(net: Network, input_hw) -> dict:
    """Parameter and MAC counts for the inference path (side heads excluded)."""
    spec = net.spec
    h, w = input_hw
    dims = _spatial_chain(spec, h, w)
    macs = 0
    for blk, (ho, wo) in zip(spec.blocks, dims):
        macs += blk.channels_out * blk.channels_in * blk.kernel * blk.kernel * ho * wo
        if blk.residual and (blk.channels_in != blk.channels_out or blk.stride != 1):
            macs += blk.channels_out * blk.channels_in * ho * wo
    macs *= spec.timesteps
    macs += spec.classes * spec.blocks[-1].channels_out  # main head, once per image
    n = spec.n
    params = sum(
        p.values.size
        for name, p in net.params.items()
        if not _side_head_record(name, n)
    )
    return {"params": int(params), "macs_per_image": int(macs)}
