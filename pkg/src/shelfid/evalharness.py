"""Zero-shot evaluation: enroll one image per class, classify every test image
by 1-NN, and report micro/macro accuracy with a per-class breakdown."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .balancing import Record, by_class
from .encoder_core import Encoder, embed_images
from .errors import ConfigurationError, DataError
from .gallery import Gallery, enroll
from .images import load_image

SUMMARY_ROW = "__summary__"
FORMATS = ("text", "csv", "json-lines")


@dataclass
class ClassResult:
    class_label: str
    n_test: int
    n_correct: int

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_test


@dataclass
class EvalReport:
    micro_accuracy: float
    macro_accuracy: float
    per_class: list[ClassResult]
    confusions: list[tuple[str, str, int]] = field(default_factory=list)
    unevaluable: list[tuple[str, int]] = field(default_factory=list)
    seed: int | None = None
    n_augmentations: int = 0
    enrolled: dict[str, str] = field(default_factory=dict)

    def accuracy_of(self, labels: Sequence[str]) -> float:
        """Macro accuracy restricted to the given classes."""
        rows = [c for c in self.per_class if c.class_label in set(labels)]
        if not rows:
            raise DataError("none of the requested classes were evaluated")
        return float(np.mean([c.accuracy for c in rows]))


def _images(records: Sequence[Record], encoder: Encoder) -> np.ndarray:
    cfg = encoder.config
    return np.stack([load_image(r.image_ref, cfg.image_size, cfg.channels) for r in records])


def build_report(truth: Sequence[str], predicted: Sequence[str | None], enrolled: set[str],
                 top_k: int = 10) -> EvalReport:
    """Aggregate predictions.  Order of the inputs does not affect the result.

    Test classes absent from ``enrolled`` count as errors in micro accuracy and
    are excluded from the macro mean.
    """
    if not truth:
        raise DataError("no test records to evaluate")
    totals: Counter = Counter()
    correct: Counter = Counter()
    pairs: Counter = Counter()
    for t, p in zip(truth, predicted):
        totals[t] += 1
        if p == t:
            correct[t] += 1
        elif t in enrolled and p is not None:
            pairs[(t, p)] += 1
    per_class = [ClassResult(c, totals[c], correct[c]) for c in sorted(totals) if c in enrolled]
    unevaluable = [(c, totals[c]) for c in sorted(totals) if c not in enrolled]
    micro = sum(correct.values()) / sum(totals.values())
    macro = float(np.mean([c.accuracy for c in per_class])) if per_class else 0.0
    confusions = sorted(((t, p, n) for (t, p), n in pairs.items()), key=lambda x: (-x[2], x[0], x[1]))[:top_k]
    return EvalReport(micro, macro, per_class, confusions, unevaluable)


def gallery_accuracy(encoder: Encoder, enroll_records: Sequence[Record], query_records: Sequence[Record],
                     n_augmentations: int = 0, seed: int = 0) -> EvalReport:
    """Enroll each record in ``enroll_records`` under its class and classify the queries."""
    if not query_records:
        raise DataError("no query records to evaluate")
    gallery = Gallery(encoder.embed_dim)
    enrolled = {}
    rng = np.random.default_rng(seed)
    for rec in enroll_records:
        image = load_image(rec.image_ref, encoder.config.image_size, encoder.config.channels)
        enroll(gallery, rec.class_label, image, encoder, n_augmentations, seed=int(rng.integers(2**31)))
        enrolled[rec.class_label] = rec.image_ref
    embeddings = embed_images(encoder, _images(query_records, encoder))
    predicted = [pid for pid, _ in gallery.classify_embeddings(embeddings)]
    report = build_report([r.class_label for r in query_records], predicted, set(enrolled))
    report.enrolled = enrolled
    report.n_augmentations = n_augmentations
    report.seed = seed
    return report


def select_enrollment(train: Sequence[Record], seed: int = 0, selection: str = "random") -> list[Record]:
    """One record per class: seeded-random, or the first in manifest order."""
    if selection not in ("random", "first"):
        raise ConfigurationError(f"unknown selection mode {selection!r}")
    rng = np.random.default_rng(seed)
    chosen = []
    groups = by_class(train)
    for label in sorted(groups):
        recs = groups[label]
        chosen.append(recs[int(rng.integers(len(recs)))] if selection == "random" else recs[0])
    return chosen


def zero_shot_eval(encoder: Encoder, train: Sequence[Record], test: Sequence[Record],
                   n_augmentations: int = 4, seed: int = 0, selection: str = "random") -> EvalReport:
    """One train image per class (plus augmentations) forms the gallery; every test record is classified."""
    if not test:
        raise DataError("test manifest is empty")
    if not train:
        raise DataError("train manifest is empty")
    # canonical order so that permuting the test manifest cannot change anything
    test = sorted(test, key=lambda r: (r.class_label, r.image_ref))
    return gallery_accuracy(encoder, select_enrollment(train, seed, selection), test, n_augmentations, seed)


def render_report(report: EvalReport, fmt: str = "text") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "n_test", "n_correct", "accuracy"])
        for c in report.per_class:
            w.writerow([c.class_label, c.n_test, c.n_correct, repr(c.accuracy)])
        n_test = sum(c.n_test for c in report.per_class) + sum(n for _, n in report.unevaluable)
        n_correct = sum(c.n_correct for c in report.per_class)
        w.writerow([SUMMARY_ROW, n_test, n_correct, repr(report.micro_accuracy)])
        return buf.getvalue()
    if fmt == "json-lines":
        lines = [json.dumps({"class": c.class_label, "n_test": c.n_test, "n_correct": c.n_correct,
                             "accuracy": c.accuracy}) for c in report.per_class]
        summary = {
            "summary": True,
            "micro_accuracy": report.micro_accuracy,
            "macro_accuracy": report.macro_accuracy,
            "confusions": [list(x) for x in report.confusions],
            "unevaluable": [list(x) for x in report.unevaluable],
            "seed": report.seed,
            "n_augmentations": report.n_augmentations,
            "enrolled": report.enrolled,
        }
        return "\n".join(lines + [json.dumps(summary, sort_keys=True)]) + "\n"
    if fmt == "text":
        out = [
            f"seed: {report.seed}  augmentations: {report.n_augmentations}",
            f"micro accuracy: {report.micro_accuracy:.4f}",
            f"macro accuracy: {report.macro_accuracy:.4f}",
            "",
            f"{'class':<24} {'n_test':>7} {'correct':>8} {'acc':>7}",
        ]
        out += [f"{c.class_label:<24} {c.n_test:>7} {c.n_correct:>8} {c.accuracy:>7.3f}" for c in report.per_class]
        if report.unevaluable:
            out.append("")
            out.append("not enrolled (counted as errors): " + ", ".join(f"{c} ({n})" for c, n in report.unevaluable))
        if report.confusions:
            out.append("")
            out.append("most confused (true -> predicted):")
            out += [f"  {t} -> {p}: {n}" for t, p, n in report.confusions]
        return "\n".join(out) + "\n"
    raise ConfigurationError(f"unknown report format {fmt!r}; choose from {', '.join(FORMATS)}")


def parse_csv_report(text: str) -> tuple[list[ClassResult], tuple[int, int, float]]:
    """Inverse of the csv rendering: per-class rows and the summary row."""
    rows = list(csv.DictReader(io.StringIO(text)))
    per_class, summary = [], None
    for row in rows:
        if row["class"] == SUMMARY_ROW:
            summary = (int(row["n_test"]), int(row["n_correct"]), float(row["accuracy"]))
        else:
            per_class.append(ClassResult(row["class"], int(row["n_test"]), int(row["n_correct"])))
    if summary is None:
        raise DataError("csv report has no summary row")
    return per_class, summary
