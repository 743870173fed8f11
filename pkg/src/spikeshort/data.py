"""Dataset ingestion (IDX files), the seeded synthetic task, and batching.

Datasets are immutable after construction. Temporal encoding is not done
here: the network feeds each image directly as input current at every
timestep, so datasets stay reusable across T.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .errors import ConsistencyError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, c, h, w] float32
    labels: np.ndarray  # [n] int64
    classes: int
    split: str = ""

    def __post_init__(self):
        n = self.images.shape[0]
        if n < 1:
            raise InputError("dataset needs at least one sample")
        if self.labels.shape != (n,):
            raise ConsistencyError(
                f"{n} images but labels shape {self.labels.shape}"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise InputError(
                f"labels outside [0, {self.classes}): "
                f"{self.labels.min()}..{self.labels.max()}"
            )

    def __len__(self):
        return self.images.shape[0]


def _read_idx(path, magic_expected, ndim, what):
    with open(path, "rb") as f:
        blob = f.read()
    header = 4 * (1 + ndim)
    if len(blob) < header:
        raise FormatError(f"{path}: truncated {what} header")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != magic_expected:
        raise FormatError(
            f"{path}: bad {what} magic 0x{magic:08x}, expected 0x{magic_expected:08x}"
        )
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) != header + count:
        raise FormatError(
            f"{path}: {what} payload is {len(blob) - header} bytes, expected {count}"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Parse big-endian IDX image/label files; pixels scale to [0, 1]."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC, 3, "image")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1, "label")
    if raw.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{raw.shape[0]} images but {labels.shape[0]} labels"
        )
    images = (raw.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(images=images, labels=labels.astype(np.int64), classes=classes, split="")


def normalize(d: Dataset, mean=None, std=None) -> Dataset:
    """Standardize pixel values: scalar stats for 1-channel data, per-channel otherwise.

    Stats are computed from ``d`` itself when not given (pass the training
    split's stats for a test split).
    """
    c = d.images.shape[1]
    if mean is None or std is None:
        axes = (0, 2, 3) if c > 1 else None
        mean = d.images.mean(axis=axes, dtype=np.float64)
        std = np.sqrt(d.images.astype(np.float64).var(axis=axes))
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise InputError(f"normalize: std must be positive, got {std}")
    if mean.ndim:
        mean = mean.reshape(1, c, 1, 1)
        std = std.reshape(1, c, 1, 1)
    images = ((d.images - mean) / std).astype(np.float32)
    return Dataset(images=images, labels=d.labels, classes=d.classes, split=d.split)


def dataset_stats(d: Dataset):
    """(mean, std) in the same convention normalize uses."""
    c = d.images.shape[1]
    axes = (0, 2, 3) if c > 1 else None
    mean = d.images.mean(axis=axes, dtype=np.float64)
    std = np.sqrt(d.images.astype(np.float64).var(axis=axes))
    return mean, std


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Prototype-plus-noise classification task that trains in minutes on CPU.

    Two prototype styles: "iid" draws every pixel uniformly (coarse,
    separable from global statistics), "grating" builds oriented
    sinusoidal textures whose class signal lives at fine spatial scale,
    so classification hinges on learned early-layer filters.
    """

    classes: int = 10
    train_per_class: int = 64
    test_per_class: int = 32
    image_size: int = 16
    channels: int = 1
    sigma: float = 0.3
    seed: int = 7
    pattern: str = "iid"

    def __post_init__(self):
        if self.pattern not in ("iid", "grating"):
            raise InputError(f"unknown prototype pattern {self.pattern!r}")


GRATING_AMPLITUDE = 0.25
GRATING_WAVELENGTH = 4.0  # pixels; resolvable by a 3x3 filter


def synthetic_prototypes(spec: SyntheticTaskSpec) -> np.ndarray:
    """Class prototypes, sampled once from the task seed (pairwise distinct)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    shape = (spec.classes, spec.channels, spec.image_size, spec.image_size)
    if spec.pattern == "grating":
        # evenly spread orientations in random order, random phases
        thetas = rng.permutation(spec.classes) * (np.pi / spec.classes)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.classes)
        yy, xx = np.mgrid[0 : spec.image_size, 0 : spec.image_size]
        protos = np.empty(shape)
        for c in range(spec.classes):
            wave = (xx * np.cos(thetas[c]) + yy * np.sin(thetas[c])) / GRATING_WAVELENGTH
            protos[c] = 0.5 + GRATING_AMPLITUDE * np.sin(2.0 * np.pi * wave + phases[c])
        return protos
    for _ in range(16):
        protos = rng.uniform(0.0, 1.0, size=shape)
        flat = protos.reshape(spec.classes, -1)
        if not any(
            np.array_equal(flat[i], flat[j])
            for i in range(spec.classes)
            for j in range(i + 1, spec.classes)
        ):
            return protos
    raise InputError("could not sample distinct prototypes")


def _synthetic_split(spec: SyntheticTaskSpec, protos, per_class, stream, split):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream]))
    labels = np.repeat(np.arange(spec.classes), per_class)
    noise = rng.normal(0.0, spec.sigma, size=(labels.size,) + protos.shape[1:])
    images = np.clip(protos[labels] + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(images=images, labels=labels.astype(np.int64), classes=spec.classes, split=split)


def make_synthetic(spec: SyntheticTaskSpec):
    """Deterministic (train, test) pair for the task seed."""
    protos = synthetic_prototypes(spec)
    train = _synthetic_split(spec, protos, spec.train_per_class, 1, "train")
    test = _synthetic_split(spec, protos, spec.test_per_class, 2, "test")
    return train, test


def nearest_prototype_accuracy(d: Dataset, protos: np.ndarray) -> float:
    """Oracle accuracy of nearest-prototype classification (the task's ceiling proxy)."""
    flat = d.images.reshape(len(d), -1).astype(np.float64)
    pf = protos.reshape(protos.shape[0], -1)
    d2 = ((flat[:, None, :] - pf[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == d.labels).mean())


def batches(d: Dataset, batch: int, shuffle_seed=None):
    """One epoch of (images, labels) minibatches; the final short batch is included.

    A seeded permutation makes iteration order reproducible; None yields
    sequential order (evaluation).
    """
    if batch < 1:
        raise InputError(f"batch must be >= 1, got {batch}")
    n = len(d)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch):
        idx = order[start:start + batch]
        yield d.images[idx], d.labels[idx]


def save_dataset(d: Dataset, path):
    """Cache a dataset in the checkpoint container format."""
    meta = {"kind": "dataset", "classes": d.classes, "split": d.split}
    write_container(path, meta, [("images", d.images), ("labels", d.labels.astype(np.float32))])


def load_dataset(path) -> Dataset:
    meta, records = read_container(path)
    if meta.get("kind") != "dataset":
        raise FormatError(f"{path}: container holds {meta.get('kind')!r}, not a dataset")
    return Dataset(
        images=records["images"],
        labels=records["labels"].astype(np.int64),
        classes=int(meta["classes"]),
        split=meta.get("split", ""),
    )
