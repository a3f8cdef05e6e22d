"""Encoder checkpoint container.

Layout (little-endian)::

    b"SHELFENC"  version:u16=1
    header_len:u32  header: UTF-8 JSON {"encoder_config": {...}, "arcface": {"margin", "scale"} | null,
                                        "extra": {...}}
    n_tensors:u32
    repeated n_tensors times:
        name_len:u16  name:utf-8  dtype:u8 (1 = float32)  ndim:u8  dims:u32[ndim]  payload

Tensors are the encoder's state dict plus ``arcface.W`` when a head is saved.
Payloads are float32, so a float32 model round-trips bit-exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .arcface import ArcFaceHead
from .encoder_core import Encoder, EncoderConfig, build_encoder
from .errors import FormatError

MAGIC = b"SHELFENC"
VERSION = 1
DTYPE_FLOAT32 = 1
HEAD_TENSOR = "arcface.W"


def _tensor_record(name: str, tensor: torch.Tensor) -> bytes:
    arr = tensor.detach().cpu().numpy().astype("<f4")
    raw = name.encode("utf-8")
    return b"".join([
        struct.pack("<H", len(raw)), raw,
        struct.pack("<BB", DTYPE_FLOAT32, arr.ndim),
        struct.pack(f"<{arr.ndim}I", *arr.shape),
        arr.tobytes(),
    ])


def checkpoint_bytes(encoder: Encoder, head: ArcFaceHead | None = None, extra: dict | None = None) -> bytes:
    header = {
        "encoder_config": encoder.config.to_dict(),
        "arcface": None if head is None else {"margin": head.margin, "scale": head.scale},
        "extra": extra or {},
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = list(encoder.state_dict().items())
    if head is not None:
        tensors.append((HEAD_TENSOR, head.W))
    parts = [MAGIC, struct.pack("<HI", VERSION, len(header_raw)), header_raw, struct.pack("<I", len(tensors))]
    parts += [_tensor_record(n, t) for n, t in tensors]
    return b"".join(parts)


def save_checkpoint(path: str | Path, encoder: Encoder, head: ArcFaceHead | None = None,
                    extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(encoder, head, extra))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse raw bytes into ``(header, {name: float32 array})``."""
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not an encoder checkpoint (bad magic)", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    (header_len,) = r.unpack("<I", "header length")
    at = r.pos
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}", at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="strict")
        dtype, ndim = r.unpack("<BB", "dtype/ndim")
        if dtype != DTYPE_FLOAT32:
            raise FormatError(f"tensor {name!r} has unknown dtype tag {dtype}", r.pos - 2)
        shape = r.unpack(f"<{ndim}I", "shape")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n, f"payload of {name!r}"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[Encoder, ArcFaceHead | None, dict]:
    """Rebuild ``(encoder, head or None, extra metadata)`` from a checkpoint file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    header, tensors = read_checkpoint(data)
    try:
        config = EncoderConfig.from_dict(header["encoder_config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint header lacks a valid encoder_config: {exc}") from None
    encoder = build_encoder(config)
    state = {k: torch.from_numpy(v) for k, v in tensors.items() if k != HEAD_TENSOR}
    try:
        encoder.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise FormatError(f"checkpoint tensors do not match the encoder: {exc}") from None
    head = None
    if HEAD_TENSOR in tensors:
        meta = header.get("arcface") or {}
        w = tensors[HEAD_TENSOR]
        head = ArcFaceHead(w.shape[0], w.shape[1], meta.get("margin", 0.5), meta.get("scale", 64.0))
        with torch.no_grad():
            head.W.copy_(torch.from_numpy(w))
    return encoder, head, header.get("extra", {})
