"""Additive angular margin (ArcFace) head and loss.

Logits are ``s * cos(theta_j)`` for non-target classes and
``s * cos(theta_y + m)`` for the target class, where ``theta_j`` is the angle
between the normalized embedding and the normalized class weight ``w_j``.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DataError, DegenerateInputError

DEFAULT_MARGIN = 0.5
DEFAULT_SCALE = 64.0


class ArcFaceHead(nn.Module):
    """Class-weight matrix ``W`` of shape ``(d, C)``, one column per class."""

    def __init__(self, embed_dim: int, num_classes: int,
                 margin: float = DEFAULT_MARGIN, scale: float = DEFAULT_SCALE):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"ArcFace needs at least 2 classes, got {num_classes}")
        if embed_dim < 1:
            raise ConfigurationError(f"embed_dim must be positive, got {embed_dim}")
        if not 0.0 <= margin < math.pi:
            raise ConfigurationError(f"margin must lie in [0, pi), got {margin}")
        if scale <= 0:
            raise ConfigurationError(f"scale must be positive, got {scale}")
        self.margin = float(margin)
        self.scale = float(scale)
        self.W = nn.Parameter(torch.empty(embed_dim, num_classes))

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.W.shape[0]

    def normalize_weights(self) -> None:
        with torch.no_grad():
            self.W.copy_(F.normalize(self.W, dim=0))

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return arcface_loss(embeddings, labels, self)


def make_head(embed_dim: int, num_classes: int, margin: float = DEFAULT_MARGIN,
              scale: float = DEFAULT_SCALE, seed: int = 0) -> ArcFaceHead:
    head = ArcFaceHead(embed_dim, num_classes, margin, scale)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.W.copy_(torch.randn(embed_dim, num_classes, generator=gen))
    head.normalize_weights()
    return head


def cosine_logits(embeddings: torch.Tensor, head: ArcFaceHead) -> torch.Tensor:
    """Cosine between each embedding and each class weight, clamped to [-1, 1].

    Accepts a single ``(d,)`` embedding or a ``(B, d)`` batch.
    """
    norms = embeddings.norm(dim=-1, keepdim=True)
    if torch.any(norms == 0):
        raise DegenerateInputError("zero-norm embedding has no direction")
    w = head.W / head.W.norm(dim=0, keepdim=True)
    return ((embeddings / norms) @ w.to(embeddings.dtype)).clamp(-1.0, 1.0)


def _safe_sin(cos: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; route those entries through a constant
    radicand = 1.0 - cos * cos
    positive = radicand > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, radicand, torch.ones_like(radicand))),
                       torch.zeros_like(radicand))


def arcface_logits(cosines: torch.Tensor, labels, head_or_margin, scale: float | None = None) -> torch.Tensor:
    """Margin-adjusted, scaled logits.

    ``head_or_margin`` is either an :class:`ArcFaceHead` or a bare margin, in
    which case ``scale`` must be given.  When ``theta_y + m`` would pass pi the
    target logit uses ``cos(theta) - m * sin(m)`` so it keeps decreasing in theta.
    """
    if isinstance(head_or_margin, ArcFaceHead):
        margin, scale = head_or_margin.margin, head_or_margin.scale
    else:
        margin = float(head_or_margin)
        if scale is None:
            raise ConfigurationError("scale required when passing a bare margin")

    single = cosines.dim() == 1
    if single:
        cosines = cosines[None]
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    num_classes = cosines.shape[1]
    if labels.numel() != cosines.shape[0]:
        raise DataError(f"{labels.numel()} labels for {cosines.shape[0]} rows")
    if torch.any(labels < 0) or torch.any(labels >= num_classes):
        raise IndexError(f"label out of range for {num_classes} classes: {labels.tolist()}")

    cos = cosines.clamp(-1.0, 1.0)
    target_cos = cos.gather(1, labels[:, None])
    phi = target_cos * math.cos(margin) - _safe_sin(target_cos) * math.sin(margin)
    # theta + m > pi  <=>  cos(theta) < cos(pi - m)
    phi = torch.where(target_cos < math.cos(math.pi - margin), target_cos - margin * math.sin(margin), phi)
    logits = cos.scatter(1, labels[:, None], phi) * scale
    return logits[0] if single else logits


def arcface_loss(embeddings: torch.Tensor, labels, head: ArcFaceHead) -> torch.Tensor:
    """Mean cross-entropy of ArcFace logits over the batch."""
    if embeddings.dim() == 1:
        embeddings = embeddings[None]
    if embeddings.shape[0] == 0:
        raise DataError("arcface_loss called on an empty batch")
    labels = torch.as_tensor(labels, dtype=torch.long, device=embeddings.device).reshape(-1)
    logits = arcface_logits(cosine_logits(embeddings, head), labels, head)
    return F.cross_entropy(logits, labels)
