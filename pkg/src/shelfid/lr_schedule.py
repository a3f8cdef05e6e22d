"""Blockwise learning-rate decay.

The top transformer block trains at ``top_lr`` and every block below it at
``decay`` times the rate of the block above.  The patch embedding continues the
chain one step below block 0; the final norm/projection and the ArcFace head sit
at ``head_lr`` (``top_lr`` by default).
"""
from __future__ import annotations

from dataclasses import dataclass

from .arcface import ArcFaceHead
from .encoder_core import Encoder, parameter_blocks
from .errors import ConfigurationError

DEFAULT_TOP_LR = 2e-4
DEFAULT_DECAY = 0.7


@dataclass(frozen=True)
class BlockLrSchedule:
    top_lr: float
    decay: float
    rates: tuple[float, ...]
    head_lr: float

    @property
    def num_blocks(self) -> int:
        return len(self.rates)

    @property
    def pre_block_lr(self) -> float:
        return self.rates[0] * self.decay


def blockwise_lrs(num_blocks: int, top_lr: float = DEFAULT_TOP_LR, decay: float = DEFAULT_DECAY,
                  head_lr: float | None = None) -> BlockLrSchedule:
    if not isinstance(num_blocks, int) or num_blocks < 1:
        raise ConfigurationError(f"num_blocks must be >= 1, got {num_blocks!r}")
    if not top_lr > 0:
        raise ConfigurationError(f"top_lr must be positive, got {top_lr}")
    if not 0 < decay <= 1:
        raise ConfigurationError(f"decay must lie in (0, 1], got {decay}")
    if head_lr is not None and not head_lr > 0:
        raise ConfigurationError(f"head_lr must be positive, got {head_lr}")
    top = num_blocks - 1
    rates = tuple(top_lr * decay ** (top - i) for i in range(num_blocks))
    return BlockLrSchedule(top_lr, decay, rates, top_lr if head_lr is None else head_lr)


def build_param_groups(encoder: Encoder, head: ArcFaceHead | None, schedule: BlockLrSchedule,
                       weight_decay: float = 0.0) -> list[dict]:
    """torch.optim parameter groups, one per block plus pre, post and head.

    Each group carries a ``name`` key alongside the usual ``params``/``lr``.
    """
    blocks = parameter_blocks(encoder)
    if len(blocks) != schedule.num_blocks:
        raise ConfigurationError(
            f"schedule has {schedule.num_blocks} rates but encoder has {len(blocks)} blocks"
        )
    groups = [
        {"name": "pre", "params": [p for _, p in encoder.pre_block_parameters()], "lr": schedule.pre_block_lr},
    ]
    for block, lr in zip(blocks, schedule.rates):
        groups.append({"name": f"block_{block.block_index}", "params": block.tensors(), "lr": lr})
    groups.append({"name": "post", "params": [p for _, p in encoder.post_block_parameters()],
                   "lr": schedule.head_lr})
    if head is not None:
        groups.append({"name": "head", "params": [head.W], "lr": schedule.head_lr})
    for g in groups:
        g["weight_decay"] = weight_decay
    return groups
