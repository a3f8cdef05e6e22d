"""Long-tail handling: manifests, equal-per-class validation split, resampling
every class to a fixed depth at full breadth, and the depth sweep."""
from __future__ import annotations

import csv
import math
import logging
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["image_ref", "class_label", "split", "augment"]


@dataclass(frozen=True)
class Record:
    image_ref: str
    class_label: str
    split: str = "train"
    augment: bool = False

    def __post_init__(self):
        if not self.class_label:
            raise DataError(f"empty class label for {self.image_ref!r}")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r} for {self.image_ref!r}")


Manifest = list[Record]


def read_manifest(path: str | Path) -> Manifest:
    """Read a ``image_ref,class_label,split,augment`` CSV.

    Relative image refs are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_HEADER:
            raise DataError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            flag = (row["augment"] or "0").strip()
            if flag not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: augment must be 0 or 1, got {flag!r}")
            ref = row["image_ref"]
            if ref and not Path(ref).is_absolute() and "://" not in ref:
                ref = str(path.parent / ref)
            records.append(Record(ref, row["class_label"], row["split"].strip(), flag == "1"))
    return records


def write_manifest(records: Iterable[Record], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.image_ref, r.class_label, r.split, int(r.augment)])


def by_class(records: Iterable[Record]) -> dict[str, list[Record]]:
    """Group records by label, preserving first-appearance order of labels and records."""
    groups: dict[str, list[Record]] = {}
    for r in records:
        groups.setdefault(r.class_label, []).append(r)
    return groups


def class_histogram(records: Iterable[Record]) -> Counter:
    return Counter(r.class_label for r in records)


def select_split(records: Iterable[Record], split: str) -> Manifest:
    return [r for r in records if r.split == split]


def make_validation_split(manifest: Sequence[Record], per_class_count: int, seed: int = 0
                          ) -> tuple[Manifest, Manifest, list[str]]:
    """Hold out ``per_class_count`` random images from each class.

    Returns ``(train, val, warnings)``.  Classes with ``per_class_count`` images
    or fewer stay entirely in train and are named in ``warnings``.
    """
    if not isinstance(per_class_count, int) or per_class_count <= 0:
        raise ConfigurationError(f"per_class_count must be a positive integer, got {per_class_count!r}")
    if any(r.split != "train" for r in manifest):
        raise DataError("make_validation_split expects a manifest of train records only")
    rng = np.random.default_rng(seed)
    train: Manifest = []
    val: Manifest = []
    warnings = []
    for label, recs in by_class(manifest).items():
        if len(recs) <= per_class_count:
            warnings.append(f"class {label!r} has {len(recs)} images (<= {per_class_count}); none held out")
            train.extend(recs)
            continue
        held = set(rng.choice(len(recs), size=per_class_count, replace=False).tolist())
        for i, r in enumerate(recs):
            if i in held:
                val.append(replace(r, split="val"))
            else:
                train.append(r)
    for w in warnings:
        logger.warning(w)
    return train, val, warnings


def resample_to_depth(manifest: Sequence[Record], depth: int, seed: int = 0) -> Manifest:
    """Bring every class to exactly ``depth`` records.

    Short classes are extended by cyclic repetition with ``augment=True`` on
    each duplicate; long classes are subsampled without replacement (original
    order kept).  No class is ever dropped.
    """
    if not isinstance(depth, int) or depth < 1:
        raise ConfigurationError(f"depth must be a positive integer, got {depth!r}")
    groups = by_class(manifest)
    if not groups:
        raise DataError("cannot resample an empty manifest")
    rng = np.random.default_rng(seed)
    out: Manifest = []
    for label, recs in groups.items():
        n = len(recs)
        if n == depth:
            out.extend(recs)
        elif n < depth:
            out.extend(recs)
            out.extend(replace(recs[i % n], augment=True) for i in range(n, depth))
        else:
            keep = np.sort(rng.permutation(n)[:depth])
            out.extend(recs[i] for i in keep)
    return out


def default_depth_grid(manifest: Sequence[Record], lo: int = 4, hi: int = 512) -> list[int]:
    """Powers of two in ``[lo, hi]`` up to the largest class size."""
    biggest = max(class_histogram(manifest).values(), default=lo)
    grid = []
    d = lo
    while d <= hi and d <= biggest:
        grid.append(d)
        d *= 2
    return grid or [lo]


class DepthSweepError(RuntimeError):
    def __init__(self, depth: int, cause: BaseException):
        super().__init__(f"depth {depth} failed: {cause!r}")
        self.depth = depth


def depth_sweep(depths: Sequence[int], train_fn: Callable[[int], Any],
                eval_fn: Callable[[Any], float]) -> tuple[int, list[tuple[int, float]]]:
    """Train at each depth, score by macro validation accuracy, return the best.

    Ties go to the smaller depth.
    """
    if not depths:
        raise ConfigurationError("depth sweep needs at least one depth")
    if len(set(depths)) != len(depths):
        raise ConfigurationError(f"depths must be distinct, got {list(depths)}")
    table = []
    for depth in depths:
        try:
            acc = float(eval_fn(train_fn(depth)))
        except Exception as exc:
            raise DepthSweepError(depth, exc) from exc
        logger.info("depth %d: macro accuracy %.4f", depth, acc)
        table.append((depth, acc))
    # NaN accuracies never win
    best = min(table, key=lambda row: (-row[1] if row[1] == row[1] else math.inf, row[0]))[0]
    return best, table


def write_sweep_report(table: Sequence[tuple[int, float]], path_or_fh) -> None:
    def _write(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["depth", "macro_accuracy"])
        for depth, acc in table:
            writer.writerow([depth, repr(float(acc))])

    if hasattr(path_or_fh, "write"):
        _write(path_or_fh)
    else:
        with Path(path_or_fh).open("w", newline="", encoding="utf-8") as fh:
            _write(fh)
