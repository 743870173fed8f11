"""Run configuration: strict JSON schema, explicit defaults, content hashing.

The effective config (every default resolved, network preset expanded)
is what gets written into the run directory, and its hash (seed and
output directory excluded) names the directory, so identical settings
land in the same place and collisions are detected rather than
overwritten.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset, SyntheticTaskSpec, load_idx, make_synthetic, normalize
from .errors import ConfigError
from .network import MODES, BlockSpec, NetworkSpec
from .neuron import NeuronConfig, SurrogateSpec
from .training import TrainerConfig

_NEURON_DEFAULTS = {"tau": 0.5, "v_th": 1.0, "reset_grad": True, "detach_temporal": False}
_TRAINER_DEFAULTS = {
    "lr": 0.01,
    "weight_decay": 0.02,
    "batch": 64,
    "epochs": 30,
    "optimizer": "adamw",
    "lr_schedule": "cosine",
    "lambda0": 0.25,
    "branch_loss": False,
}
_DATA_DEFAULTS = {
    "kind": "synthetic",
    "classes": 10,
    "train_per_class": 64,
    "test_per_class": 32,
    "image_size": 16,
    "channels": 1,
    "sigma": 0.3,
    "seed": 7,
    "pattern": "iid",
    "normalize": True,
}
_IDX_KEYS = {"kind", "train_images", "train_labels", "test_images", "test_labels", "classes", "normalize"}
_NETWORK_KEYS = {"preset", "blocks", "classes", "timesteps", "in_channels"}
_TOP_KEYS = {"mode", "seed", "out", "network", "neuron", "surrogate", "trainer", "data"}

PRESETS = ("deep8", "small3")


def preset_blocks(name: str, in_channels: int) -> tuple:
    """Reference topologies. deep8: 8 plain 3x3 conv blocks, 16 then 32
    channels, stride-2 downsamples at blocks 3 and 6 (needs odd input
    extents so conv output sizes stay integral)."""
    if name == "deep8":
        chain = [
            (in_channels, 16, 1), (16, 16, 1), (16, 16, 2), (16, 32, 1),
            (32, 32, 1), (32, 32, 2), (32, 32, 1), (32, 32, 1),
        ]
    elif name == "small3":
        chain = [(in_channels, 8, 1), (8, 8, 2), (8, 8, 1)]
    else:
        raise ConfigError(f"unknown network preset {name!r}, expected one of {PRESETS}")
    return tuple(BlockSpec(cin, cout, stride=s) for cin, cout, s in chain)


def _reject_unknown(obj: dict, allowed, where: str):
    extra = set(obj) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


@dataclass
class RunConfig:
    mode: str
    seed: int
    out: str
    network: NetworkSpec
    neuron: NeuronConfig
    surrogate: SurrogateSpec
    trainer: TrainerConfig
    data: dict


def parse_config(source) -> RunConfig:
    """Parse a config dict or JSON file path into a fully resolved RunConfig.

    Unknown keys anywhere are rejected; every default is made explicit in
    the resolved form.
    """
    if isinstance(source, dict):
        obj = source
    else:
        with open(source) as f:
            obj = json.load(f)
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(obj, _TOP_KEYS, "config")

    mode = obj.get("mode", "vanilla")
    if mode not in MODES:
        raise ConfigError(f"config.mode: unknown mode {mode!r}, expected one of {MODES}")
    seed = int(obj.get("seed", 0))
    out = str(obj.get("out", "runs"))

    neuron_obj = {**_NEURON_DEFAULTS, **obj.get("neuron", {})}
    _reject_unknown(neuron_obj, _NEURON_DEFAULTS, "config.neuron")
    neuron = NeuronConfig(**neuron_obj)

    surrogate = SurrogateSpec.from_json(obj.get("surrogate", {"kind": "triangular"}))

    trainer_obj = {**_TRAINER_DEFAULTS, **obj.get("trainer", {})}
    _reject_unknown(trainer_obj, _TRAINER_DEFAULTS, "config.trainer")
    trainer = TrainerConfig(mode=mode, seed=seed, **trainer_obj).validate()

    data_obj = dict(obj.get("data", {}))
    kind = data_obj.get("kind", "synthetic")
    if kind == "synthetic":
        data = {**_DATA_DEFAULTS, **data_obj}
        _reject_unknown(data, _DATA_DEFAULTS, "config.data")
    elif kind == "idx":
        _reject_unknown(data_obj, _IDX_KEYS, "config.data")
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in data_obj:
                raise ConfigError(f"config.data: idx datasets need {key}")
        data = {"classes": 10, "normalize": True, **data_obj}
    else:
        raise ConfigError(f"config.data.kind: unknown kind {kind!r}")

    net_obj = dict(obj.get("network", {}))
    _reject_unknown(net_obj, _NETWORK_KEYS, "config.network")
    classes = int(net_obj.get("classes", data.get("classes", 10)))
    timesteps = int(net_obj.get("timesteps", 4))
    in_channels = int(net_obj.get("in_channels", data.get("channels", 1)))
    if "blocks" in net_obj and "preset" in net_obj:
        raise ConfigError("config.network: give either preset or blocks, not both")
    if "blocks" in net_obj:
        blocks = tuple(_parse_block(b, i) for i, b in enumerate(net_obj["blocks"], 1))
    else:
        blocks = preset_blocks(net_obj.get("preset", "deep8"), in_channels)
    network = NetworkSpec(
        blocks=blocks, classes=classes, timesteps=timesteps, mode=mode
    ).validate()

    return RunConfig(
        mode=mode, seed=seed, out=out, network=network,
        neuron=neuron, surrogate=surrogate, trainer=trainer, data=data,
    )


_BLOCK_KEYS = {"channels_in", "channels_out", "stride", "residual", "kernel", "use_bn"}


def _parse_block(obj: dict, idx: int) -> BlockSpec:
    _reject_unknown(obj, _BLOCK_KEYS, f"config.network.blocks[{idx}]")
    if "channels_in" not in obj or "channels_out" not in obj:
        raise ConfigError(f"config.network.blocks[{idx}]: channels_in and channels_out are required")
    return BlockSpec(**obj)


def effective_dict(rc: RunConfig) -> dict:
    """The fully resolved config, as written into the run directory."""
    return {
        "mode": rc.mode,
        "seed": rc.seed,
        "out": rc.out,
        "network": {
            "blocks": rc.network.to_json()["blocks"],
            "classes": rc.network.classes,
            "timesteps": rc.network.timesteps,
        },
        "neuron": {
            "tau": rc.neuron.tau,
            "v_th": rc.neuron.v_th,
            "reset_grad": rc.neuron.reset_grad,
            "detach_temporal": rc.neuron.detach_temporal,
        },
        "surrogate": rc.surrogate.to_json(),
        "trainer": {k: getattr(rc.trainer, k) for k in _TRAINER_DEFAULTS},
        "data": dict(rc.data),
    }


def config_hash(rc: RunConfig) -> str:
    """Content hash over everything except seed and output directory."""
    eff = effective_dict(rc)
    eff.pop("seed")
    eff.pop("out")
    blob = json.dumps(eff, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def build_datasets(rc: RunConfig):
    """(train, test) per the data descriptor, normalized with train-split stats."""
    d = rc.data
    if d["kind"] == "synthetic":
        spec = SyntheticTaskSpec(
            classes=d["classes"],
            train_per_class=d["train_per_class"],
            test_per_class=d["test_per_class"],
            image_size=d["image_size"],
            channels=d["channels"],
            sigma=d["sigma"],
            seed=d["seed"],
            pattern=d["pattern"],
        )
        train, test = make_synthetic(spec)
    else:
        train = load_idx(d["train_images"], d["train_labels"], classes=d["classes"])
        test = load_idx(d["test_images"], d["test_labels"], classes=d["classes"])
        train = Dataset(train.images, train.labels, train.classes, "train")
        test = Dataset(test.images, test.labels, test.classes, "test")
    if d.get("normalize", True):
        from .data import dataset_stats

        mean, std = dataset_stats(train)
        train = normalize(train, mean, std)
        test = normalize(test, mean, std)
    return train, test
