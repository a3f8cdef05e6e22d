"""Embedding gallery and 1-nearest-neighbor classifier.

Each product is enrolled from a single image plus augmentations of it; a query
is assigned to the product owning the single most similar stored embedding.
Adding a product never touches the embeddings already stored, so new products
need no retraining.

File layout (all little-endian)::

    b"RKLIPGAL"  version:u16=1  dim:u32  n_products:u32
    repeated n_products times:
        id_len:u16  id:utf-8  n_embeddings:u32  float32[n_embeddings * dim]
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .encoder_core import embed_images
from .errors import ConflictError, DegenerateInputError, FormatError, NotFoundError, ShapeError, StateError
from .images import EnrollAugment, default_enroll_augment

MAGIC = b"RKLIPGAL"
VERSION = 1


def _unit(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(v)):
        raise DegenerateInputError("embedding is zero or non-finite")
    return (v / norms).astype(np.float32)


def _row_dots(mat: np.ndarray, q: np.ndarray) -> np.ndarray:
    # row-local reduction: a score never depends on how many rows are stored
    return (mat * q).sum(axis=-1)


class Gallery:
    def __init__(self, dim: int):
        if dim < 1:
            raise ShapeError(f"gallery dim must be positive, got {dim}")
        self.dim = int(dim)
        self._entries: dict[str, np.ndarray] = {}
        self._order: dict[str, int] = {}
        self._next_order = 0
        self._cache: tuple[np.ndarray, list[str]] | None = None

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, product_id: str) -> bool:
        return product_id in self._entries

    def __eq__(self, other) -> bool:
        if not isinstance(other, Gallery):
            return NotImplemented
        if self.dim != other.dim or self.product_ids() != other.product_ids():
            return False
        return all(
            self._entries[p].tobytes() == other._entries[p].tobytes() for p in self._entries
        )

    def product_ids(self) -> list[str]:
        """Ids in enrollment order."""
        return sorted(self._entries, key=lambda p: (self._order[p], p))

    def embeddings(self, product_id: str) -> np.ndarray:
        """Stored float32 unit embeddings of one product, shape (n, dim)."""
        try:
            return self._entries[product_id]
        except KeyError:
            raise NotFoundError(f"unknown product id {product_id!r}") from None

    def enrollment_order(self, product_id: str) -> int:
        self.embeddings(product_id)
        return self._order[product_id]

    @property
    def num_embeddings(self) -> int:
        return sum(len(e) for e in self._entries.values())

    def add(self, product_id: str, embeddings: np.ndarray) -> "Gallery":
        """Enroll precomputed embeddings (normalized here) under a new id."""
        if not isinstance(product_id, str) or not product_id:
            raise ShapeError("product id must be a non-empty string")
        if len(product_id.encode("utf-8")) > 0xFFFF:
            raise ShapeError("product id longer than 65535 UTF-8 bytes")
        if product_id in self._entries:
            raise ConflictError(f"product {product_id!r} already enrolled; remove it first")
        emb = np.atleast_2d(np.asarray(embeddings))
        if emb.ndim != 2 or emb.shape[1] != self.dim or emb.shape[0] == 0:
            raise ShapeError(f"expected (n>=1, {self.dim}) embeddings, got {emb.shape}")
        unit = _unit(emb)
        unit.setflags(write=False)
        self._entries[product_id] = unit
        self._order[product_id] = self._next_order
        self._next_order += 1
        self._cache = None
        return self

    def remove(self, product_id: str) -> "Gallery":
        if product_id not in self._entries:
            raise NotFoundError(f"unknown product id {product_id!r}")
        del self._entries[product_id]
        del self._order[product_id]
        self._cache = None
        return self

    def _stacked(self) -> tuple[np.ndarray, list[str]]:
        if self._cache is None:
            ids = self.product_ids()
            mat = np.concatenate([self._entries[p] for p in ids]).astype(np.float64)
            owners = [p for p in ids for _ in range(len(self._entries[p]))]
            self._cache = (mat, owners)
        return self._cache

    def similarities(self, query: np.ndarray) -> np.ndarray:
        """Cosine similarity of a query to every stored embedding, enrollment order."""
        if not self._entries:
            raise StateError("gallery is empty")
        q = self._query(query)
        mat, _ = self._stacked()
        return _row_dots(mat, q)

    def _query(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query).reshape(-1)
        if q.shape[0] != self.dim:
            raise ShapeError(f"query has dim {q.shape[0]}, gallery has {self.dim}")
        return _unit(q[None])[0].astype(np.float64)

    def classify_embedding(self, query: np.ndarray, metric: str = "cosine") -> tuple[str, float]:
        """1-NN over all stored embeddings.

        Returns ``(product_id, cosine similarity of the winning embedding)``.
        ``metric="euclidean"`` ranks by L2 distance between unit vectors, which
        gives the same ranking.  Ties go to the earliest-enrolled product, then
        the lexicographically smallest id.
        """
        if not self._entries:
            raise StateError("cannot classify against an empty gallery")
        q = self._query(query)
        mat, owners = self._stacked()
        sims = _row_dots(mat, q)
        if metric == "cosine":
            key = sims
        elif metric == "euclidean":
            key = -np.linalg.norm(mat - q, axis=1)
        else:
            raise ValueError(f"unknown metric {metric!r}")
        best = key.max()
        # owners are already in (enrollment_order, id) order
        idx = int(np.flatnonzero(key == best)[0])
        return owners[idx], float(sims[idx])

    def classify_embeddings(self, queries: np.ndarray) -> list[tuple[str, float]]:
        """Cosine 1-NN for a ``(n, dim)`` batch of queries, same tie-break rule."""
        if not self._entries:
            raise StateError("cannot classify against an empty gallery")
        queries = np.atleast_2d(np.asarray(queries))
        if queries.shape[1] != self.dim:
            raise ShapeError(f"queries have dim {queries.shape[1]}, gallery has {self.dim}")
        q = _unit(queries).astype(np.float64)
        mat, owners = self._stacked()
        out = []
        chunk = max(1, 2**22 // max(1, mat.size))
        for start in range(0, len(q), chunk):
            sims = _row_dots(mat[None], q[start:start + chunk, None, :])
            # argmax returns the first maximal index, i.e. the earliest-enrolled owner
            idx = sims.argmax(axis=1)
            out += [(owners[i], float(sims[row, i])) for row, i in enumerate(idx)]
        return out

    def copy(self) -> "Gallery":
        g = Gallery(self.dim)
        g._entries = dict(self._entries)
        g._order = dict(self._order)
        g._next_order = self._next_order
        g._cache = self._cache
        return g

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HII", VERSION, self.dim, len(self._entries))]
        for pid in self.product_ids():
            raw = pid.encode("utf-8")
            emb = self._entries[pid]
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", len(emb)))
            parts.append(emb.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Gallery":
        reader = _Reader(data)
        magic = reader.take(len(MAGIC), "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        version_at = reader.pos
        version, dim, count = reader.unpack("<HII", "header")
        if version != VERSION:
            raise FormatError(f"unsupported gallery version {version}", version_at)
        if dim == 0:
            raise FormatError("gallery dim is zero", version_at + 2)
        gallery = cls(dim)
        for _ in range(count):
            start = reader.pos
            (id_len,) = reader.unpack("<H", "id length")
            try:
                pid = reader.take(id_len, "product id").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"product id is not valid UTF-8: {exc}", start + 2) from None
            (n,) = reader.unpack("<I", "embedding count")
            payload_at = reader.pos
            values = np.frombuffer(reader.take(4 * n * dim, "embedding payload"), dtype="<f4")
            if n == 0:
                raise FormatError(f"product {pid!r} has no embeddings", payload_at - 4)
            if pid in gallery._entries:
                raise FormatError(f"duplicate product id {pid!r}", start)
            emb = values.reshape(n, dim).astype(np.float32)
            emb.setflags(write=False)
            gallery._entries[pid] = emb
            gallery._order[pid] = gallery._next_order
            gallery._next_order += 1
        if reader.pos != len(data):
            raise FormatError(f"{len(data) - reader.pos} trailing bytes", reader.pos)
        return gallery

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Gallery":
        path = Path(path)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise FormatError(f"gallery file not found: {path}") from None
        return cls.from_bytes(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def enroll(gallery: Gallery, product_id: str, image: np.ndarray, encoder, n_augmentations: int = 4,
           seed: int = 0, augment: EnrollAugment = default_enroll_augment) -> Gallery:
    """Store the embedding of ``image`` and of ``n_augmentations`` augmented copies."""
    if n_augmentations < 0:
        raise ShapeError(f"n_augmentations must be >= 0, got {n_augmentations}")
    if product_id in gallery:
        raise ConflictError(f"product {product_id!r} already enrolled; remove it first")
    if encoder.embed_dim != gallery.dim:
        raise ShapeError(f"encoder dim {encoder.embed_dim} != gallery dim {gallery.dim}")
    rng = np.random.default_rng(seed)
    views = [np.asarray(image, dtype=np.float32)]
    views += [augment(views[0], k, rng) for k in range(1, n_augmentations + 1)]
    return gallery.add(product_id, embed_images(encoder, np.stack(views)))


def classify(gallery: Gallery, image: np.ndarray, encoder) -> tuple[str, float]:
    if not len(gallery):
        raise StateError("cannot classify against an empty gallery")
    return gallery.classify_embedding(embed_images(encoder, np.asarray(image)[None])[0])


def remove(gallery: Gallery, product_id: str) -> Gallery:
    return gallery.remove(product_id)


def save(gallery: Gallery, path: str | Path) -> None:
    gallery.save(path)


def load(path: str | Path) -> Gallery:
    return Gallery.load(path)
