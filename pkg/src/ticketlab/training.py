"""SGD with momentum, learning-rate schedules and the epoch training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mask import Mask
from .network import ParamStore, apply_mask, mask_tensors, update_running_stats
from .tensor import NonFiniteError, make_rng

SCHEDULES = ("fixed", "step", "cosine", "warmup_step")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last parameters that were finite."""

    def __init__(self, message: str, last_good: ParamStore, epoch: int, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class Schedule:
    """Learning-rate shape. Milestones are in epochs; warmup is in iterations."""

    kind: str = "fixed"
    milestones: tuple = ()
    factor: float = 0.1
    lr_min: float = 0.0
    warmup_iters: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 0.1
    schedule: Schedule = field(default_factory=Schedule)
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def lr_at(schedule: Schedule, base_lr: float, epoch: int, iteration: int,
          total_iters: int = 1) -> float:
    """Learning rate at a given (0-based) epoch and global iteration."""
    if schedule.kind == "fixed":
        return base_lr
    if schedule.kind == "cosine":
        if total_iters <= 1:
            return schedule.lr_min
        t = min(iteration, total_iters - 1) / (total_iters - 1)
        return schedule.lr_min + 0.5 * (base_lr - schedule.lr_min) * (1 + math.cos(math.pi * t))
    lr = base_lr * schedule.factor ** sum(1 for m in schedule.milestones if epoch >= m)
    if schedule.kind == "warmup_step" and iteration < schedule.warmup_iters:
        lr *= iteration / schedule.warmup_iters
    return lr


@dataclass
class OptState:
    buffers: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamStore) -> "OptState":
        return cls({k: np.zeros_like(v) for k, v in params.trainable().items()})

    def copy(self) -> "OptState":
        return OptState({k: v.copy() for k, v in self.buffers.items()}, self.step)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to conv/linear weights only (no norm params or biases)."""
    return name.endswith(".weight") and value.ndim >= 2


def sgd_step(params: ParamStore, grads: dict, mask: Mask, opt: OptState, lr_now: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> tuple[ParamStore, OptState]:
    """``v <- momentum*v + g + wd*w``; ``w <- w - lr*v``; then re-mask weights and buffers."""
    values = params.trainable()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(g.size - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"gradient of {name} has {bad} non-finite entries "
                                 f"at step {opt.step}")
    bits = mask_tensors(params, mask)
    new_values, new_buf = {}, {}
    for name, w in values.items():
        g = grads[name]
        if weight_decay and decays(name, w):
            g = g + weight_decay * w
        v = momentum * opt.buffers[name] + g
        w = w - lr_now * v
        if name in bits:
            w = w * bits[name]
            v = v * bits[name]
        new_values[name] = w
        new_buf[name] = v
    return params.with_trainable(new_values), OptState(new_buf, opt.step + 1)


@dataclass
class TrainResult:
    params: ParamStore
    history: list
    opt: OptState
    step_losses: list
    snapshots: dict = field(default_factory=dict)
    rng_state: dict | None = None


def _batches(perm: np.ndarray, batch_size: int, min_batch: int):
    for s in range(0, len(perm), batch_size):
        idx = perm[s:s + batch_size]
        if len(idx) >= min_batch:
            yield idx


def steps_per_epoch(n: int, batch_size: int, min_batch: int = 2) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= min_batch else 0)


def train(params: ParamStore, mask: Mask, task, config: TrainConfig,
          echo: Callable[[str], None] | None = print, snapshot_steps=(),
          eval_every: int = 1) -> TrainResult:
    """Run ``config.epochs`` epochs of masked SGD over seeded shuffles of the task's train split.

    ``snapshot_steps`` lists global step counts after which a copy of the
    parameters is kept (``0`` means the initial parameters). Each epoch appends
    ``{"epoch", "loss", "metric"}`` to the history and emits one progress line.
    """
    params = apply_mask(params, mask)
    opt = OptState.zeros(params)
    rng = make_rng(config.seed, "shuffle")
    task.begin(params, mask, make_rng(config.seed, "task-state"))
    n_train = len(task.train_idx)
    per_epoch = steps_per_epoch(n_train, config.batch_size)
    total = per_epoch * config.epochs
    wanted = set(int(s) for s in snapshot_steps)
    snapshots = {0: params.copy()} if 0 in wanted else {}
    history, step_losses = [], []
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(task.train_idx)
        losses = []
        for idx in _batches(perm, config.batch_size, 2):
            lr = lr_at(config.schedule, config.lr, epoch, step, total)
            loss, grads, stats = task.step(params, mask, idx, make_rng(config.seed, "step", step))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step}",
                                       params, epoch, step)
            try:
                new_params, opt = sgd_step(params, grads, mask, opt, lr,
                                           config.momentum, config.weight_decay)
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), params, epoch, step) from exc
            params = update_running_stats(new_params, stats)
            losses.append(loss)
            step_losses.append(loss)
            step += 1
            if step in wanted:
                snapshots[step] = params.copy()
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        metric = (task.evaluate(params, mask)
                  if eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == config.epochs)
                  else float("nan"))
        history.append({"epoch": epoch + 1, "loss": mean_loss, "metric": metric})
        if echo is not None:
            echo(f"epoch={epoch + 1} loss={mean_loss:.6f} metric={metric:.6f}")
    return TrainResult(params, history, opt, step_losses, snapshots,
                       rng.bit_generator.state)


def evaluate(params: ParamStore, mask: Mask, task) -> float:
    return task.evaluate(params, mask)
