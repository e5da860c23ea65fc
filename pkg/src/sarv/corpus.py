"""Corpus readers, label schemes, and encoded record serialization.

A corpus is delimited text (CSV/TSV) with a configurable column mapping
for {text, label, category}, or line-delimited JSON records with those
keys.  Encoded records are the unit stored in shards: fixed-length
token ids, per-token char ids, true length, and class label.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from sarv.embed import CharVocab, TokenVocab, encode_chars, encode_token_ids
from sarv.errors import ConfigError, DataError
from sarv.textproc import FixedSentence, NormConfig, TokenSeq, normalize, tokenize, unify_length

BINARY_CLASSES = ("negative", "positive")
TERNARY_CLASSES = ("negative", "neutral", "positive")


@dataclass(frozen=True)
class LabelScheme:
    """Ordered class names; records are one-hot encoded against them."""

    classes: tuple[str, ...]

    @classmethod
    def for_num_classes(cls, num_classes: int) -> "LabelScheme":
        if num_classes == 2:
            return cls(BINARY_CLASSES)
        if num_classes == 3:
            return cls(TERNARY_CLASSES)
        raise ConfigError(f"num_classes must be 2 or 3, got {num_classes}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def label_index(self, raw: str | int) -> int:
        """Map a raw label (class name or integer index) to its index."""
        if isinstance(raw, int):
            idx = raw
        else:
            name = raw.strip().lower()
            if name in self.classes:
                return self.classes.index(name)
            try:
                idx = int(name)
            except ValueError:
                raise DataError(f"unknown label {raw!r}; expected one of {self.classes}")
        if not 0 <= idx < len(self.classes):
            raise DataError(f"label index {idx} out of range for {len(self.classes)} classes")
        return idx


@dataclass(frozen=True)
class RawRecord:
    text: str
    label: str
    category: str | None = None
    source_id: str | int | None = None


@dataclass
class SkippedRow:
    line_no: int
    reason: str


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".csv",):
        return "csv"
    if suffix in (".tsv", ".tab"):
        return "tsv"
    if suffix in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    raise ConfigError(f"cannot infer corpus format from {path.name!r}; pass fmt explicitly")


def read_corpus(
    path,
    fmt: str | None = None,
    text_col: str | int = "text",
    label_col: str | int = "label",
    category_col: str | int | None = "category",
    max_bad_rows: int = 100,
) -> tuple[list[RawRecord], list[SkippedRow]]:
    """Load raw records, skipping malformed rows up to ``max_bad_rows``.

    Column values may be header names (CSV/TSV with a header row) or
    zero-based integer indices (headerless files).  Beyond the skip
    threshold the whole read fails.
    """
    path = Path(path)
    fmt = fmt or _infer_format(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"corpus {path} is not valid UTF-8 at byte {exc.start}") from exc

    if fmt == "jsonl":
        records, skipped = _read_jsonl(text, text_col, label_col, category_col)
    elif fmt in ("csv", "tsv"):
        records, skipped = _read_delimited(
            text, "," if fmt == "csv" else "\t", text_col, label_col, category_col
        )
    else:
        raise ConfigError(f"unknown corpus format {fmt!r}")

    if len(skipped) > max_bad_rows:
        raise DataError(
            f"{len(skipped)} malformed rows exceed threshold {max_bad_rows}; "
            f"first: line {skipped[0].line_no}: {skipped[0].reason}"
        )
    return records, skipped


def _read_jsonl(text, text_col, label_col, category_col):
    records: list[RawRecord] = []
    skipped: list[SkippedRow] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(
                RawRecord(
                    text=str(obj[text_col]),
                    label=str(obj[label_col]),
                    category=str(obj[category_col]) if category_col and category_col in obj else None,
                    source_id=line_no,
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            skipped.append(SkippedRow(line_no, f"{type(exc).__name__}: {exc}"))
    return records, skipped


def _read_delimited(text, delimiter, text_col, label_col, category_col):
    rows = list(csv.reader(text.splitlines(), delimiter=delimiter))
    records: list[RawRecord] = []
    skipped: list[SkippedRow] = []
    positional = isinstance(text_col, int) and isinstance(label_col, int)
    if positional:
        header_map = None
        data_rows = list(enumerate(rows, start=1))
    else:
        if not rows:
            return records, skipped
        header_map = {name: i for i, name in enumerate(rows[0])}
        data_rows = list(enumerate(rows[1:], start=2))

    def col_index(col, line_no):
        if isinstance(col, int):
            return col
        if header_map is None or col not in header_map:
            raise KeyError(col)
        return header_map[col]

    for line_no, row in data_rows:
        if not row:
            continue
        try:
            ti = col_index(text_col, line_no)
            li = col_index(label_col, line_no)
            category = None
            if category_col is not None:
                try:
                    ci = col_index(category_col, line_no)
                    category = row[ci]
                except (KeyError, IndexError):
                    category = None
            records.append(
                RawRecord(text=row[ti], label=row[li], category=category, source_id=line_no)
            )
        except (KeyError, IndexError) as exc:
            skipped.append(SkippedRow(line_no, f"missing column: {exc}"))
    return records, skipped


@dataclass(frozen=True)
class EncodedSentence:
    """Fixed-length token ids + per-token char ids + true length + label."""

    token_ids: tuple[int, ...]
    char_ids: tuple[tuple[int, ...], ...]
    true_length: int
    label: int

    def to_json_line(self) -> str:
        chars = [_trim_zeros(row) for row in self.char_ids]
        obj = {"t": list(self.token_ids), "c": chars, "len": self.true_length, "y": self.label}
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)

    @classmethod
    def from_json_line(cls, line: str, max_word_chars: int) -> "EncodedSentence":
        try:
            obj = json.loads(line)
            chars = tuple(
                tuple(int(c) for c in row) + (0,) * (max_word_chars - len(row))
                for row in obj["c"]
            )
            return cls(
                token_ids=tuple(int(t) for t in obj["t"]),
                char_ids=chars,
                true_length=int(obj["len"]),
                label=int(obj["y"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed shard record: {exc}") from exc


def _trim_zeros(row: Sequence[int]) -> list[int]:
    out = list(row)
    while out and out[-1] == 0:
        out.pop()
    return out


def encode_sentence(
    fixed: FixedSentence,
    token_vocab: TokenVocab,
    char_vocab: CharVocab,
    label: int,
) -> EncodedSentence:
    token_ids = tuple(int(i) for i in encode_token_ids(fixed, token_vocab))
    char_ids = tuple(
        tuple(int(c) for c in encode_chars(t, char_vocab)) for t in fixed.tokens
    )
    return EncodedSentence(
        token_ids=token_ids, char_ids=char_ids, true_length=fixed.true_length, label=label
    )


def preprocess_records(
    records: Iterable[RawRecord], cfg: NormConfig, max_len: int
) -> list[tuple[TokenSeq, FixedSentence, RawRecord]]:
    """Normalize and tokenize each record, keeping the pre-truncation sequence."""
    out = []
    for rec in records:
        seq = tokenize(normalize(rec.text, cfg), source_id=rec.source_id)
        out.append((seq, unify_length(seq, max_len), rec))
    return out


def labels_array(records: Sequence[EncodedSentence]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)
