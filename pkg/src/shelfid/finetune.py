"""Metric-learning finetuning: ArcFace loss, AdamW over blockwise-decayed
parameter groups, optional resampling to a fixed per-class depth, and
gallery-based validation after every epoch."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .arcface import DEFAULT_MARGIN, DEFAULT_SCALE, ArcFaceHead, arcface_loss, make_head
from .balancing import Record, by_class, resample_to_depth
from .checkpoint import save_checkpoint
from .encoder_core import Encoder
from .errors import ConfigurationError, DataError, TrainingDivergedError
from .evalharness import gallery_accuracy
from .images import AugmentationPolicy, augment, load_image
from .lr_schedule import DEFAULT_DECAY, DEFAULT_TOP_LR, BlockLrSchedule, blockwise_lrs, build_param_groups

logger = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 64
    weight_decay: float = 0.05
    adamw_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    top_lr: float = DEFAULT_TOP_LR
    decay: float = DEFAULT_DECAY
    head_lr: float | None = None
    margin: float = DEFAULT_MARGIN
    scale: float = DEFAULT_SCALE
    depth: int | None = None  # None trains on the unbalanced manifest
    val_augmentations: int = 0
    lr_time_decay: bool = False  # cosine decay over steps; off by default
    checkpoint_dir: str | None = None

    def validate(self) -> None:
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if not all(0 <= b < 1 for b in self.adamw_betas):
            raise ConfigurationError(f"adamw betas must lie in [0, 1), got {self.adamw_betas}")
        if self.depth is not None and (not isinstance(self.depth, int) or self.depth < 1):
            raise ConfigurationError(f"depth must be a positive integer or None, got {self.depth!r}")

    def schedule(self, num_blocks: int) -> BlockLrSchedule:
        return blockwise_lrs(num_blocks, self.top_lr, self.decay, self.head_lr)


@dataclass
class TrainingHistory:
    loss: list[float] = field(default_factory=list)
    val_macro_acc: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    first_batch_loss: float | None = None

    def rows(self) -> list[tuple[int, float, float]]:
        return [(i + 1, l, a) for i, (l, a) in enumerate(zip(self.loss, self.val_macro_acc))]

    def to_csv(self) -> str:
        lines = ["epoch,loss,val_macro_acc"]
        lines += [f"{e},{l!r},{a!r}" for e, l, a in self.rows()]
        return "\n".join(lines) + "\n"


def record_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-record generator; independent of loading order or worker count."""
    return np.random.default_rng([seed, epoch, index])


def load_and_augment(record: Record, image_size: int, channels: int = 3,
                     policy: AugmentationPolicy | None = None,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Decode a record's image and apply the policy when it is flagged (or by chance)."""
    image = load_image(record.image_ref, image_size, channels)
    if policy is None or not policy.enabled:
        return np.array(image, copy=True)
    if rng is None:
        rng = np.random.default_rng(0)
    if record.augment or rng.random() < policy.unflagged_prob:
        return augment(image, policy, rng)
    return np.array(image, copy=True)


def label_map(records: Sequence[Record]) -> dict[str, int]:
    return {label: i for i, label in enumerate(sorted(by_class(records)))}


def validation_accuracy(encoder: Encoder, val: Sequence[Record], n_augmentations: int = 0,
                        seed: int = 0) -> float:
    """Macro 1-NN accuracy: first val image of each class enrolled, the rest queried."""
    groups = by_class(val)
    enroll_recs = [recs[0] for recs in groups.values() if len(recs) > 1]
    queries = [r for recs in groups.values() if len(recs) > 1 for r in recs[1:]]
    if not queries:
        return math.nan
    # classes with a single val image still act as distractors
    enroll_recs += [recs[0] for recs in groups.values() if len(recs) == 1]
    return gallery_accuracy(encoder, enroll_recs, queries, n_augmentations, seed).macro_accuracy


def finetune(encoder: Encoder, head: ArcFaceHead | None, train: Sequence[Record],
             val: Sequence[Record] | None, config: FinetuneConfig
             ) -> tuple[Encoder, ArcFaceHead, TrainingHistory]:
    """Train ``encoder`` and ``head`` in place; returns them with the history.

    ``head`` may be None, in which case one is created with a column per train
    class (sorted label order) at the configured margin and scale.
    """
    config.validate()
    if not train:
        raise DataError("train manifest is empty")
    labels = label_map(train)
    if head is None:
        head = make_head(encoder.embed_dim, len(labels), config.margin, config.scale, seed=config.seed)
    if head.num_classes != len(labels) or head.embed_dim != encoder.embed_dim:
        raise ConfigurationError(
            f"head is {head.embed_dim}x{head.num_classes}, data needs {encoder.embed_dim}x{len(labels)}"
        )
    if config.depth is not None:
        train = resample_to_depth(train, config.depth, config.seed)
    train = list(train)
    if config.batch_size > len(train):
        raise ConfigurationError(f"batch_size {config.batch_size} exceeds train size {len(train)}")

    schedule = config.schedule(encoder.config.num_blocks)
    groups = build_param_groups(encoder, head, schedule, config.weight_decay)
    optimizer = torch.optim.AdamW(groups, betas=tuple(config.adamw_betas), weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    scheduler = None
    if config.lr_time_decay:
        total = steps_per_epoch * config.epochs
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda step: 0.5 * (1 + math.cos(math.pi * min(step, total) / total))
        )

    dtype = next(encoder.parameters()).dtype
    cfg = encoder.config
    targets = np.array([labels[r.class_label] for r in train])
    history = TrainingHistory()
    last_checkpoint = None
    encoder.train()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            images = np.stack([
                load_and_augment(train[i], cfg.image_size, cfg.channels, config.augmentation,
                                 record_rng(config.seed, epoch, int(i)))
                for i in idx
            ])
            batch = torch.from_numpy(images).to(dtype).permute(0, 3, 1, 2)
            loss = arcface_loss(encoder(batch), torch.from_numpy(targets[idx]), head)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}", epoch + 1, last_checkpoint)
            if history.first_batch_loss is None:
                history.first_batch_loss = value
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            batch_losses.append(value)

        history.loss.append(float(np.mean(batch_losses)))
        acc = validation_accuracy(encoder, val, config.val_augmentations, config.seed) if val else math.nan
        encoder.train()
        history.val_macro_acc.append(acc)
        history.wall_time.append(time.perf_counter() - t0)
        logger.info("epoch %d: loss %.4f val macro acc %.4f (%.1fs)",
                    epoch + 1, history.loss[-1], acc, history.wall_time[-1])
        if config.checkpoint_dir is not None:
            last_checkpoint = str(Path(config.checkpoint_dir) / f"epoch_{epoch + 1:03d}.ckpt")
            save_checkpoint(last_checkpoint, encoder, head)
    encoder.eval()
    return encoder, head, history
