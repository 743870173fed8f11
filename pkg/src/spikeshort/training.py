"""Training loop: evolutionary balance schedule, loss, optimizer, evaluation.

One iteration runs forward (all head logits) -> advance the balance
coefficient -> combine head outputs -> cross-entropy -> backward ->
optimizer step, in that order. The coefficient for iteration i (1-based
count of completed updates) is lambda0 * (1 - i/I) in evolutionary mode,
constant lambda0 in shortcut mode, 0 in vanilla mode, and 1 in
uniform-sum mode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericError, StateError
from .network import (
    Network,
    combine_outputs,
    forward_infer,
    forward_train,
    save_checkpoint,
)

OPTIMIZERS = ("adamw", "sgd")


@dataclass
class ScheduleState:
    """Balance-coefficient schedule position."""

    lambda0: float = 0.25
    i: int = 0
    total: int = 1
    mode: str = "evolutionary"

    def advance(self):
        self.i += 1


def lambda_at(s: ScheduleState) -> float:
    if s.total <= 0:
        raise ConfigError(f"schedule needs a positive iteration total, got {s.total}")
    if s.mode == "vanilla":
        return 0.0
    if s.mode == "shortcut":
        return s.lambda0
    if s.mode == "uniform-sum":
        return 1.0
    return s.lambda0 * (1.0 - s.i / s.total)


def cosine_lr(i: int, total: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * i / total)): lr0 at i=0, exactly 0 at i=total."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * i / total))


@dataclass
class TrainerConfig:
    lr: float = 0.01
    weight_decay: float = 0.02
    batch: int = 64
    epochs: int = 30
    optimizer: str = "adamw"
    lr_schedule: str = "cosine"
    lambda0: float = 0.25
    mode: str = "evolutionary"
    seed: int = 0
    branch_loss: bool = False  # ablation: weighted sum of per-branch CE losses

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule != "cosine":
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.lambda0 < 0:
            raise ConfigError(f"lambda0 must be >= 0, got {self.lambda0}")
        return self


class AdamW:
    """Adaptive moments with decoupled weight decay (applied before the update)."""

    def __init__(self, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)
            elif m.shape != p.values.shape:
                raise StateError(f"optimizer state shape drift for {name}")
            v = self.v[name]
            if self.weight_decay:
                p.values *= 1.0 - lr * self.weight_decay
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    """Plain gradient descent with the same decoupled decay convention."""

    def __init__(self, weight_decay=0.0):
        self.weight_decay = weight_decay

    def step(self, named_params, lr: float):
        for name, p in named_params:
            if self.weight_decay:
                p.values *= 1.0 - lr * self.weight_decay
            p.values -= lr * p.grad


def make_optimizer(cfg: TrainerConfig):
    if cfg.optimizer == "adamw":
        return AdamW(weight_decay=cfg.weight_decay)
    return SGD(weight_decay=cfg.weight_decay)


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    loss: float
    lambda_i: float
    lr: float
    branch_losses: list
    acc: float | None = None


def train_step(net: Network, batch, sched: ScheduleState, cfg: TrainerConfig, opt) -> MetricsRecord:
    """One iteration in the prescribed order; raises NumericError on non-finite loss."""
    images, labels = batch
    trace = forward_train(net, images)
    sched.advance()
    lam = lambda_at(sched)
    if cfg.branch_loss and len(trace.b) > 1:
        loss = T.softmax_cross_entropy(trace.main, labels)
        for bl in trace.b[:-1]:
            loss = T.add(loss, T.scale(T.softmax_cross_entropy(bl, labels), lam))
    else:
        o_final = combine_outputs(trace, lam)
        loss = T.softmax_cross_entropy(o_final, labels)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise NumericError(f"non-finite loss at iteration {sched.i}", iteration=sched.i)
    branch_losses = [
        T.softmax_cross_entropy_value(bl.values, labels) for bl in trace.b
    ]
    net.zero_grad()
    T.backward(loss)
    lr = cosine_lr(sched.i - 1, sched.total, cfg.lr)
    opt.step(net.parameters(), lr)
    return MetricsRecord(
        iteration=sched.i,
        epoch=0,
        loss=loss_val,
        lambda_i=lam,
        lr=lr,
        branch_losses=branch_losses,
    )


def evaluate(net: Network, dataset, timesteps: int | None = None, batch: int = 256) -> float:
    """Mean argmax accuracy of the inference path (no tape, no side heads)."""
    if dataset.images.shape[0] == 0:
        raise InputError("evaluate: empty dataset")
    was_training = net.training
    net.eval()
    correct = 0
    try:
        for start in range(0, dataset.images.shape[0], batch):
            imgs = dataset.images[start:start + batch]
            logits = forward_infer(net, imgs, timesteps)
            correct += int((logits.argmax(axis=1) == dataset.labels[start:start + batch]).sum())
    finally:
        if was_training:
            net.train()
    return correct / dataset.images.shape[0]


def _format_cell(x) -> str:
    return repr(float(x))


def write_metrics_header(fh, branches: int):
    cols = ["iteration", "epoch", "loss", "lambda", "lr", "acc"]
    cols += [f"branch{i}" for i in range(1, branches + 1)]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(cols)


def write_metrics_row(fh, rec: MetricsRecord):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(
        [
            rec.iteration,
            rec.epoch,
            _format_cell(rec.loss),
            _format_cell(rec.lambda_i),
            _format_cell(rec.lr),
            "" if rec.acc is None else _format_cell(rec.acc),
        ]
        + [_format_cell(b) for b in rec.branch_losses]
    )


def train_loop(
    net: Network,
    train_ds,
    test_ds,
    cfg: TrainerConfig,
    run_dir=None,
    timesteps: int | None = None,
) -> list[MetricsRecord]:
    """Full training run; returns all metrics records.

    When ``run_dir`` is set, streams metrics.csv (flushed per epoch so a
    numeric abort preserves what happened) and saves best/final
    checkpoints there. Deterministic for a fixed config and seed.
    """
    from .data import batches  # local import; data module has no training deps

    cfg.validate()
    n = train_ds.images.shape[0]
    if n == 0:
        raise InputError("train_loop: empty dataset")
    per_epoch = (n + cfg.batch - 1) // cfg.batch
    sched = ScheduleState(
        lambda0=cfg.lambda0, i=0, total=cfg.epochs * per_epoch, mode=cfg.mode
    )
    opt = make_optimizer(cfg)
    records: list[MetricsRecord] = []
    branches = len(net.head_indices())

    metrics_fh = None
    if run_dir is not None:
        metrics_fh = open(run_dir / "metrics.csv", "w", newline="")
        write_metrics_header(metrics_fh, branches)

    best_acc = -1.0
    try:
        for epoch in range(1, cfg.epochs + 1):
            epoch_recs = []
            shuffle_seed = int(
                np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0]
            )
            try:
                for batch in batches(train_ds, cfg.batch, shuffle_seed):
                    rec = train_step(net, batch, sched, cfg, opt)
                    rec.epoch = epoch
                    epoch_recs.append(rec)
            finally:
                if epoch_recs:
                    acc = None
                    aborted = len(epoch_recs) < per_epoch
                    if not aborted:
                        acc = evaluate(net, test_ds, timesteps)
                        epoch_recs[-1].acc = acc
                    records.extend(epoch_recs)
                    if metrics_fh is not None:
                        for rec in epoch_recs:
                            write_metrics_row(metrics_fh, rec)
                        metrics_fh.flush()
                    if acc is not None and acc > best_acc and run_dir is not None:
                        best_acc = acc
                        save_checkpoint(net, run_dir / "checkpoint_best.ckpt")
        if run_dir is not None:
            save_checkpoint(net, run_dir / "checkpoint_final.ckpt")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return records
