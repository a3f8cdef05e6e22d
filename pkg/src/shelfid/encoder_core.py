"""Block-structured image encoder.

A small ViT-shaped network (patch embedding -> pre-norm transformer blocks ->
mean pool -> linear projection) that stands in for a large pretrained vision
backbone.  What matters for finetuning is the block structure: every trainable
tensor is assigned to exactly one of

* the pre-block group (patch embedding, positional embedding),
* one of ``num_blocks`` transformer blocks, ordered bottom (0) to top,
* the post-block group (final norm, projection).

Images are ``(height, width, channels)`` float arrays with values in ``[0, 1]``;
per-channel mean/std normalization happens inside the encoder using the values
recorded in :class:`EncoderConfig`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

NamedParameter = tuple[str, nn.Parameter]


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 4
    embed_dim: int = 64
    patch_size: int = 8
    heads: int = 4
    seed: int = 0
    image_size: int = 32
    channels: int = 3
    mlp_ratio: int = 2
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)
    train_projection: bool = True

    def validate(self) -> None:
        for name in ("num_blocks", "embed_dim", "patch_size", "heads", "image_size", "channels", "mlp_ratio"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed_dim ({self.embed_dim}) must be divisible by heads ({self.heads})"
            )
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size ({self.image_size}) must be divisible by patch_size ({self.patch_size})"
            )
        if len(self.mean) != self.channels or len(self.std) != self.channels:
            raise ConfigurationError("mean and std need one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ConfigurationError("std entries must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown encoder config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("mean", "std"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class ParameterBlock:
    block_index: int
    parameters: list[NamedParameter] = field(default_factory=list)

    def tensors(self) -> list[nn.Parameter]:
        return [p for _, p in self.parameters]

    def numel(self) -> int:
        return sum(p.numel() for _, p in self.parameters)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.out(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """Toy ViT. ``forward`` takes a ``(B, C, H, W)`` batch of [0, 1] pixels."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(config.channels, d, config.patch_size, stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.heads, config.mlp_ratio) for _ in range(config.num_blocks)
        )
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d)
        self.proj.requires_grad_(config.train_projection)

        self.register_buffer("pixel_mean", torch.tensor(config.mean).view(1, -1, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(config.std).view(1, -1, 1, 1), persistent=False)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def _reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        fan_in = self.config.channels * self.config.patch_size ** 2
        nn.init.trunc_normal_(self.patch_embed.weight, std=1.0 / math.sqrt(fan_in))
        nn.init.zeros_(self.patch_embed.bias)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        # projection starts near identity so the untrained embedding is the pooled token
        with torch.no_grad():
            self.proj.weight.add_(torch.eye(self.config.embed_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.pixel_mean.to(x.dtype)) / self.pixel_std.to(x.dtype)
        x = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.proj(self.norm(x).mean(dim=1))

    def pre_block_parameters(self) -> list[NamedParameter]:
        return [
            (n, p)
            for n, p in self.named_parameters()
            if p.requires_grad and (n.startswith("patch_embed.") or n == "pos_embed")
        ]

    def post_block_parameters(self) -> list[NamedParameter]:
        return [
            (n, p)
            for n, p in self.named_parameters()
            if p.requires_grad and (n.startswith("norm.") or n.startswith("proj."))
        ]

    def trainable_parameters(self) -> Iterator[NamedParameter]:
        return ((n, p) for n, p in self.named_parameters() if p.requires_grad)


def build_encoder(config: EncoderConfig) -> Encoder:
    """Build an encoder whose initialization is a pure function of ``config.seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        encoder = Encoder(config)
        encoder._reset_parameters()
    return encoder


def parameter_blocks(encoder: Encoder) -> list[ParameterBlock]:
    """Trainable parameters of each transformer block, ordered bottom to top.

    Together with ``encoder.pre_block_parameters()`` and
    ``encoder.post_block_parameters()`` these partition every trainable tensor.
    """
    out = []
    for i, block in enumerate(encoder.blocks):
        named = [(f"blocks.{i}.{n}", p) for n, p in block.named_parameters() if p.requires_grad]
        out.append(ParameterBlock(i, named))
    return out


def check_image(image: np.ndarray | torch.Tensor, config: EncoderConfig) -> None:
    if image.ndim != 3:
        raise ShapeError(f"expected (height, width, channels) image, got shape {tuple(image.shape)}")
    h, w, c = image.shape
    if min(h, w, c) <= 0:
        raise ShapeError(f"empty image shape {tuple(image.shape)}")
    if c != config.channels:
        raise ShapeError(f"expected {config.channels} channels, got {c}")
    if h % config.patch_size or w % config.patch_size:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {config.patch_size}")
    if h != config.image_size or w != config.image_size:
        raise ShapeError(f"encoder expects {config.image_size}x{config.image_size} input, got {h}x{w}")


def _to_batch(images, encoder: Encoder) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(np.require(images, requirements=["C", "W"]))
    return images.to(dtype).permute(0, 3, 1, 2)


def encode(encoder: Encoder, image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Raw (un-normalized) embedding of a single HWC image.

    Gradients flow to the encoder parameters whenever autograd is enabled.
    """
    check_image(image, encoder.config)
    if isinstance(image, np.ndarray) and not np.all(np.isfinite(image)):
        raise ShapeError("image contains non-finite values")
    return encoder(_to_batch(image[None], encoder))[0]


def encode_batch(encoder: Encoder, images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Raw embeddings for a ``(B, H, W, C)`` stack of images."""
    if images.ndim != 4:
        raise ShapeError(f"expected (batch, height, width, channels), got {tuple(images.shape)}")
    check_image(images[0], encoder.config)
    return encoder(_to_batch(images, encoder))


def embed_images(encoder: Encoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode embeddings as a float64 numpy array of shape (B, d)."""
    was_training = encoder.training
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(encode_batch(encoder, images[start:start + batch_size]).double().numpy())
    encoder.train(was_training)
    if not chunks:
        return np.zeros((0, encoder.embed_dim))
    return np.concatenate(chunks)


def normalize(vector: np.ndarray | torch.Tensor, eps: float = 1e-12):
    """L2-normalize along the last axis."""
    if isinstance(vector, torch.Tensor):
        return F.normalize(vector, dim=-1, eps=eps)
    v = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)
