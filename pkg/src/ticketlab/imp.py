"""Iterative magnitude pruning, the sparsity ladder and weight rewinding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from .mask import LayoutMismatch, Mask
from .network import ParamStore, apply_mask, init_head
from .store import Checkpoint, resolve_checkpoint
from .training import TrainConfig, TrainingDiverged, steps_per_epoch, train

REWIND_MODES = ("pretrained", "random", "early")
# Early-mode source meaning "the snapshot taken during this run's dense round".
SELF = "round0"


def sparsity_at_round(k: int, p: float = 0.2) -> float:
    """Target sparsity ``1 - (1 - p)**k`` after ``k`` rounds."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return 1.0 - (1.0 - p) ** k


@dataclass(frozen=True)
class SparsityLadder:
    rounds: int
    p: float = 0.2

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0 < self.p < 1:
            raise ValueError("p must be in (0, 1)")

    @property
    def levels(self) -> list[float]:
        return [sparsity_at_round(k, self.p) for k in range(self.rounds + 1)]

    def level(self, k: int) -> float:
        return sparsity_at_round(k, self.p)

    def survivors(self, k: int, d1: int) -> int:
        """Exact ``ceil(d1 * (1-p)**k)`` using rational arithmetic."""
        keep = (1 - Fraction(self.p).limit_denominator(10 ** 9)) ** k
        return math.ceil(d1 * keep)


@dataclass(frozen=True)
class RewindSpec:
    """Where surviving weights go back to before each retraining.

    ``source`` is a checkpoint id (or a :class:`Checkpoint`) resolved through
    the store; ``percent`` is the share of training for the early mode.
    """

    mode: str
    source: object
    percent: float | None = None

    def __post_init__(self):
        if self.mode not in REWIND_MODES:
            raise ValueError(f"unknown rewind mode {self.mode!r}")
        if self.mode == "early":
            if self.percent is None or not 0 < self.percent < 100:
                raise ValueError("early rewinding needs percent in (0, 100)")
        if self.source is None:
            raise ValueError("rewind source is required")
        if isinstance(self.source, str) and self.source == SELF and self.mode != "early":
            raise ValueError(f"source {SELF!r} is only valid for early rewinding")


def early_step(total_steps: int, percent: float) -> int:
    """Optimizer step whose weights stand for the ``percent``% checkpoint (at least 1)."""
    return max(1, int(round(total_steps * percent / 100.0)))


def global_magnitude_prune(params: ParamStore, mask: Mask, fraction: float | None = None,
                           *, count: int | None = None) -> Mask:
    """Turn off the smallest-magnitude surviving weights across all prunable layers.

    By default ``floor(fraction * |S|)`` survivors are removed; ``count``
    overrides the number directly. Ties go to the lower flat index.
    """
    layout = params.layout
    mask.check(layout.layout_id, layout.size)
    alive = np.flatnonzero(mask.to_bool())
    if alive.size == 0:
        raise ValueError("no surviving weights to prune")
    if count is None:
        if fraction is None or not 0 < fraction < 1:
            raise ValueError("fraction must be in (0, 1)")
        count = int(math.floor(fraction * alive.size + 1e-9))
    if not 0 <= count <= alive.size:
        raise ValueError(f"cannot remove {count} of {alive.size} survivors")
    if count == 0:
        return mask
    mags = np.abs(layout.flatten(params.backbone))[alive]
    # stable sort on ascending index order gives the documented tie-break
    drop = alive[np.argsort(mags, kind="stable")[:count]]
    bits = mask.to_bool()
    bits[drop] = False
    return Mask.from_bool(bits, mask.layout_id)


def rewind(params: ParamStore, spec: RewindSpec, store=None, mask: Mask | None = None,
           head_rng: np.random.Generator | None = None) -> ParamStore:
    """Replace backbone weights and norm statistics with the source checkpoint's.

    The head is kept from ``params`` unless ``head_rng`` is given, in which
    case a fresh head is drawn. Masked coordinates are zeroed when a mask is
    supplied.
    """
    src = resolve_checkpoint(store, spec.source).params
    if (src.layout.layout_id != params.layout.layout_id
            or set(src.backbone) != set(params.backbone)
            or set(src.buffers) != set(params.buffers)):
        raise LayoutMismatch("rewind source does not match the model layout")
    for k, v in params.backbone.items():
        if src.backbone[k].shape != v.shape:
            raise LayoutMismatch(f"shape mismatch for {k}")
    head = (init_head(params.config, head_rng) if head_rng is not None
            else {k: v.copy() for k, v in params.head.items()})
    out = ParamStore(params.config,
                     {k: src.backbone[k].copy() for k in params.backbone}, head,
                     {k: src.buffers[k].copy() for k in params.buffers},
                     tuple(params.prunable))
    return apply_mask(out, mask) if mask is not None else out


@dataclass
class ImpRound:
    round: int
    mask: Mask
    checkpoint: Checkpoint
    metric: float
    history: list = field(default_factory=list)

    @property
    def sparsity(self) -> float:
        return self.mask.sparsity


def imp_run(initial: Checkpoint, task, train_config: TrainConfig, rounds: int,
            rewind_spec: RewindSpec, store=None, p: float = 0.2,
            echo: Callable[[str], None] | None = print,
            on_round: Callable[[ImpRound], None] | None = None) -> list[ImpRound]:
    """Train, prune ``p`` of the survivors, rewind; repeat for ``rounds`` prunings.

    Returns ``rounds + 1`` entries: round 0 is the dense run, round ``k``
    holds the mask at sparsity ``1 - (1-p)**k`` and the weights trained under
    it. Removal counts are anchored to the ladder so the survivor count after
    round ``k`` is exactly ``ceil(d1 * (1-p)**k)``. The head at every rewind
    is the initial checkpoint's head. With the early mode and source
    ``SELF`` the rewind point is a snapshot of the dense round itself.
    Divergence stops the run and returns the completed rounds.
    """
    params = initial.params
    layout = params.layout
    mask = layout.full_mask()
    if initial.mask is not None and initial.mask != mask:
        raise ValueError("imp_run needs an all-ones initial mask")
    self_early = isinstance(rewind_spec.source, str) and rewind_spec.source == SELF
    snap_steps = ()
    if self_early:
        total = steps_per_epoch(len(task.train_idx), train_config.batch_size) * train_config.epochs
        snap_steps = (early_step(total, rewind_spec.percent),)
    else:
        resolve_checkpoint(store, rewind_spec.source)  # fail early if missing
    ladder = SparsityLadder(rounds, p)
    parent = initial.meta.get("id") or initial.id
    out: list[ImpRound] = []
    start = params
    for k in range(rounds + 1):
        if k > 0:
            start = rewind(params, rewind_spec, store, mask)
        if echo is not None:
            echo(f"round={k} sparsity={mask.sparsity:.4f}")
        try:
            res = train(start, mask, task, train_config, echo=echo,
                        snapshot_steps=snap_steps if k == 0 else ())
        except TrainingDiverged as exc:
            if echo is not None:
                echo(f"round={k} diverged: {exc}; stopping")
            break
        if k == 0 and self_early:
            snap = res.snapshots.get(snap_steps[0], res.params)
            rewind_spec = replace(rewind_spec, source=Checkpoint(snap))
        metric = res.history[-1]["metric"] if res.history else task.evaluate(res.params, mask)
        ckpt = Checkpoint(res.params, mask, res.opt, res.rng_state,
                          {"round": k, "epoch": train_config.epochs,
                           "task_id": getattr(task, "name", "task"), "parent": parent})
        rec = ImpRound(k, mask, ckpt, float(metric), res.history)
        out.append(rec)
        if on_round is not None:
            on_round(rec)
        if k < rounds:
            target = ladder.survivors(k + 1, layout.size)
            mask = global_magnitude_prune(res.params, mask, count=mask.popcount - target)
    return out
