"""Lottery-ticket experiments on a small numpy ResNet: iterative magnitude
pruning, rewinding, transfer of sparse masks and mask analytics."""

from .mask import LayoutMismatch, Mask
from .network import ModelConfig, ParamStore, build, forward, backward
from .imp import RewindSpec, SparsityLadder, global_magnitude_prune, imp_run, rewind, sparsity_at_round
from .experiment import Aggregate, RunRecord, is_matching, is_universal, is_winning_ticket
from .store import Checkpoint, load_checkpoint, load_mask, save_checkpoint, save_mask

__version__ = "0.1.0"

__all__ = [
    "Aggregate", "Checkpoint", "LayoutMismatch", "Mask", "ModelConfig", "ParamStore",
    "RewindSpec", "RunRecord", "SparsityLadder", "backward", "build", "forward",
    "global_magnitude_prune", "imp_run", "is_matching", "is_universal", "is_winning_ticket",
    "load_checkpoint", "load_mask", "rewind", "save_checkpoint", "save_mask",
    "sparsity_at_round",
]
