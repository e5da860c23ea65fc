"""Confusion-matrix metrics and corpus category statistics."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed as [true class, predicted class]."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Elementwise sum; per-shard matrices merge in any order."""
        if self.class_names != other.class_names:
            raise ValueError("cannot merge confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


def confusion(
    preds: Sequence[int],
    truth: Sequence[int],
    num_classes: int | None = None,
    class_names: Sequence[str] | None = None,
) -> ConfusionMatrix:
    """Tally predictions against true labels."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise ValueError(f"preds shape {preds.shape} != truth shape {truth.shape}")
    if preds.size == 0:
        raise ValueError("cannot build a confusion matrix from zero records")
    if num_classes is None:
        num_classes = int(max(preds.max(), truth.max())) + 1
    if preds.min() < 0 or truth.min() < 0 or preds.max() >= num_classes or truth.max() >= num_classes:
        raise ValueError(f"labels out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(num_classes))
    if len(names) != num_classes:
        raise ValueError(f"{len(names)} class names for {num_classes} classes")
    return ConfusionMatrix(counts, names)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    flagged: bool  # empty class: absent from both truth and predictions


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    per_class: tuple[ClassMetrics, ...]
    macro_f1: float
    weighted_f1: float
    class_names: tuple[str, ...]

    def to_text(self) -> str:
        lines = [f"accuracy    {self.accuracy:.6f}"]
        lines.append(f"macro F1    {self.macro_f1:.6f}")
        lines.append(f"weighted F1 {self.weighted_f1:.6f}")
        lines.append(f"{'class':<12} {'precision':>9} {'recall':>9} {'f1':>9}")
        for name, m in zip(self.class_names, self.per_class):
            flag = "  (empty)" if m.flagged else ""
            lines.append(f"{name:<12} {m.precision:>9.6f} {m.recall:>9.6f} {m.f1:>9.6f}{flag}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "accuracy": self.accuracy,
                "macro_f1": self.macro_f1,
                "weighted_f1": self.weighted_f1,
                "per_class": [
                    {
                        "class": name,
                        "precision": m.precision,
                        "recall": m.recall,
                        "f1": m.f1,
                        "flagged": m.flagged,
                    }
                    for name, m in zip(self.class_names, self.per_class)
                ],
            },
            separators=(",", ":"),
        )


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus per-class precision/recall/F1 and macro/weighted F1.

    Zero denominators yield 0 (flagged when the class is absent from
    both truth and predictions).
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("metrics need a non-empty confusion matrix")
    diag = np.diag(counts)
    col = counts.sum(axis=0)
    row = counts.sum(axis=1)
    per_class = []
    f1s = []
    for c in range(len(diag)):
        precision = diag[c] / col[c] if col[c] > 0 else 0.0
        recall = diag[c] / row[c] if row[c] > 0 else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if (precision + recall) > 0
            else 0.0
        )
        per_class.append(
            ClassMetrics(float(precision), float(recall), float(f1),
                         flagged=bool(col[c] == 0 and row[c] == 0))
        )
        f1s.append(f1)
    weights = row / total
    return MetricsReport(
        accuracy=float(diag.sum() / total),
        per_class=tuple(per_class),
        macro_f1=float(np.mean(f1s)),
        weighted_f1=float(np.dot(weights, f1s)),
        class_names=cm.class_names,
    )


@dataclass(frozen=True)
class CategoryStats:
    """Per-category class counts, in Table form: one row per category."""

    rows: tuple[tuple[str, tuple[int, ...]], ...]
    class_names: tuple[str, ...]

    @property
    def totals(self) -> tuple[int, ...]:
        if not self.rows:
            return tuple(0 for _ in self.class_names)
        return tuple(int(s) for s in np.sum([c for _, c in self.rows], axis=0))

    def to_text(self) -> str:
        width = max([len("category")] + [len(name) for name, _ in self.rows])
        header = f"{'category':<{width}}" + "".join(f"\t{n}" for n in self.class_names)
        lines = [header]
        for name, counts in self.rows:
            lines.append(f"{name:<{width}}" + "".join(f"\t{c}" for c in counts))
        if self.rows:
            lines.append(f"{'total':<{width}}" + "".join(f"\t{c}" for c in self.totals))
        return "\n".join(lines) + "\n"


# Column layout of the statistics table; filtered to the active scheme.
_STATS_COLUMN_ORDER = ("positive", "negative", "neutral")


def category_stats(records: Iterable, scheme) -> CategoryStats:
    """Group records by ``.category``, counting raw ``.label`` values per class.

    ``scheme`` is a :class:`sarv.corpus.LabelScheme`; labels may be class
    names or integer indices.  Columns follow positive/negative/neutral
    order, restricted to the scheme's classes.
    """
    columns = tuple(c for c in _STATS_COLUMN_ORDER if c in scheme.classes)
    columns = columns or scheme.classes
    table: dict[str, Counter] = {}
    for rec in records:
        category = rec.category if rec.category is not None else "(none)"
        name = scheme.classes[scheme.label_index(rec.label)]
        table.setdefault(category, Counter())[name] += 1
    rows = tuple(
        (cat, tuple(table[cat].get(c, 0) for c in columns)) for cat in sorted(table)
    )
    return CategoryStats(rows=rows, class_names=columns)
