"""Data model and file ingestion for categorical event sequences.

A record is one event: a timestamp, a categorical label, and optional
numeric features. Sequences are per-user, time-ordered and immutable;
every other module consumes the types defined here.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

UNK_LABEL = "<UNK>"
DEFAULT_HORIZON = 32


class IngestError(ValueError):
    """Malformed input file; the message names the offending line."""


@dataclass(frozen=True)
class Event:
    """One categorical event with an optional vector of numeric features."""

    t: float
    category: int
    numeric: tuple[float, ...] = ()


@dataclass(frozen=True)
class EventSequence:
    """One user's time-ordered events. Timestamps must be non-decreasing."""

    user_id: str
    events: tuple[Event, ...]

    def __post_init__(self) -> None:
        if len(self.events) == 0:
            raise ValueError(f"sequence {self.user_id!r} is empty")
        ts = [e.t for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"sequence {self.user_id!r} has decreasing timestamps")

    def __len__(self) -> int:
        return len(self.events)

    def categories(self) -> np.ndarray:
        """Category indices as an int64 array."""
        return np.fromiter(
            (e.category for e in self.events), dtype=np.int64, count=len(self.events)
        )

    def numeric_arity(self) -> int:
        return len(self.events[0].numeric)


class Vocabulary:
    """Dense bijection between category labels and indices 0..K-1."""

    def __init__(self, labels: Iterable[str]):
        self.labels: tuple[str, ...] = tuple(labels)
        self._index = {lab: i for i, lab in enumerate(self.labels)}
        if len(self._index) != len(self.labels):
            raise ValueError("vocabulary labels must be distinct")

    @classmethod
    def from_observed(cls, labels: Iterable[str]) -> "Vocabulary":
        """Build from labels in first-seen order, dropping repeats."""
        seen: dict[str, None] = {}
        for lab in labels:
            seen.setdefault(lab, None)
        return cls(seen.keys())

    @property
    def size(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def encode(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"unknown category label {label!r}") from None

    def decode(self, index: int) -> str:
        return self.labels[index]

    @property
    def has_unk(self) -> bool:
        return UNK_LABEL in self._index

    @property
    def unk_index(self) -> int:
        if not self.has_unk:
            raise ValueError("vocabulary has no UNK slot")
        return self._index[UNK_LABEL]

    def with_unk(self) -> "Vocabulary":
        """Copy with a reserved UNK label appended (index K)."""
        if self.has_unk:
            return self
        return Vocabulary(self.labels + (UNK_LABEL,))

    def encode_or_unk(self, label: str) -> int:
        idx = self._index.get(label)
        return self.unk_index if idx is None else idx


class CategoricalDistribution:
    """Point on the K-simplex: non-negative entries summing to 1 (tol 1e-9)."""

    __slots__ = ("probs",)

    def __init__(self, probs: Sequence[float] | np.ndarray):
        p = np.array(probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probabilities must form a non-empty 1-D vector")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        self.probs = p

    @property
    def k(self) -> int:
        return int(self.probs.size)

    def __getitem__(self, idx: int) -> float:
        return float(self.probs[idx])

    def __repr__(self) -> str:
        return f"CategoricalDistribution({self.probs.tolist()!r})"


@dataclass(frozen=True)
class Dataset:
    """Sequences plus their shared vocabulary.

    ``resorted`` counts sequences whose rows arrived out of time order and
    were stably re-sorted during ingestion.
    """

    sequences: tuple[EventSequence, ...]
    vocab: Vocabulary
    resorted: int = 0

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[EventSequence]:
        return iter(self.sequences)

    def numeric_arity(self) -> int:
        return self.sequences[0].numeric_arity() if self.sequences else 0


@dataclass(frozen=True)
class ForecastTask:
    """A (prefix, horizon) split: condition on the prefix, score the horizon."""

    prefix: EventSequence
    horizon: EventSequence

    @property
    def n(self) -> int:
        return len(self.horizon.events)

    @property
    def user_id(self) -> str:
        return self.prefix.user_id


def split_prefix_horizon(seq: EventSequence, n: int = DEFAULT_HORIZON) -> ForecastTask:
    """Split off the last ``n`` events as the horizon; the rest is the prefix."""
    if n < 1:
        raise ValueError("horizon length must be >= 1")
    if len(seq) <= n:
        raise ValueError(
            f"sequence too short for horizon: length {len(seq)} <= n {n}"
        )
    prefix = EventSequence(seq.user_id, seq.events[:-n])
    horizon = EventSequence(seq.user_id, seq.events[-n:])
    return ForecastTask(prefix=prefix, horizon=horizon)


def empirical_distribution(
    events: Sequence[Event] | np.ndarray, vocab: Vocabulary | int
) -> CategoricalDistribution:
    """Relative category frequencies of ``events`` over a size-K vocabulary."""
    k = vocab.size if isinstance(vocab, Vocabulary) else int(vocab)
    tokens = token_array(events)
    if tokens.size == 0:
        raise ValueError("empirical distribution of an empty event list is undefined")
    if tokens.min() < 0 or tokens.max() >= k:
        raise ValueError("category index out of vocabulary range")
    counts = np.bincount(tokens, minlength=k).astype(np.float64)
    return CategoricalDistribution(counts / tokens.size)


def token_array(x) -> np.ndarray:
    """Coerce an EventSequence, list of Events, or int sequence to int64 indices."""
    if isinstance(x, EventSequence):
        return x.categories()
    if isinstance(x, np.ndarray):
        return x.astype(np.int64, copy=False)
    seq = list(x)
    if seq and isinstance(seq[0], Event):
        return np.fromiter((e.category for e in seq), dtype=np.int64, count=len(seq))
    return np.asarray(seq, dtype=np.int64)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from any mix of ints/strings (platform independent)."""
    raw = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# Ingestion and serialization
# ---------------------------------------------------------------------------

_Record = tuple[str, float, str, tuple[float, ...]]


def ingest(path: str | Path, format: str | None = None) -> Dataset:
    """Read a JSONL or CSV event file into a Dataset.

    Rows are grouped by user (keyed, file order preserved within user) and
    stably sorted by timestamp where needed. The vocabulary covers all
    observed categories in first-seen order.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"no such file: {path}")
    fmt = format or _infer_format(path)
    if fmt == "jsonl":
        records = _read_jsonl(path)
    elif fmt == "csv":
        records = _read_csv(path)
    else:
        raise IngestError(f"unknown format {fmt!r} (expected jsonl or csv)")
    return _assemble(records)


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise IngestError(f"cannot infer format from suffix {suffix!r}; pass format=")


def _read_jsonl(path: Path) -> list[_Record]:
    records: list[_Record] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise IngestError(f"line {lineno}: record is not an object")
            try:
                user = obj["user_id"]
                t = obj["t"]
                cat = obj["cat"]
            except KeyError as exc:
                raise IngestError(f"line {lineno}: missing field {exc.args[0]!r}") from None
            if not isinstance(user, str) or not isinstance(cat, str):
                raise IngestError(f"line {lineno}: user_id and cat must be strings")
            if not isinstance(t, (int, float)) or isinstance(t, bool):
                raise IngestError(f"line {lineno}: t must be a number")
            num = obj.get("num", [])
            if not isinstance(num, list) or any(
                not isinstance(v, (int, float)) or isinstance(v, bool) for v in num
            ):
                raise IngestError(f"line {lineno}: num must be a list of numbers")
            records.append((user, float(t), cat, tuple(float(v) for v in num)))
    return records


def _read_csv(path: Path) -> list[_Record]:
    records: list[_Record] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return records
        expected = ["user_id", "t", "cat"]
        if header[:3] != expected:
            raise IngestError(f"line 1: header must start with {','.join(expected)}")
        arity = len(header) - 3
        for j, name in enumerate(header[3:], start=1):
            if name != f"num_{j}":
                raise IngestError(f"line 1: numeric column {j} must be named num_{j}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + arity:
                raise IngestError(f"line {lineno}: expected {3 + arity} fields, got {len(row)}")
            user, t_raw, cat = row[0], row[1], row[2]
            try:
                t = float(t_raw)
                num = tuple(float(v) for v in row[3:])
            except ValueError:
                raise IngestError(f"line {lineno}: non-numeric value") from None
            records.append((user, t, cat, num))
    return records


def _assemble(records: list[_Record]) -> Dataset:
    vocab = Vocabulary.from_observed(cat for _, _, cat, _ in records)
    arity: int | None = None
    by_user: dict[str, list[_Record]] = {}
    for i, rec in enumerate(records, start=1):
        if arity is None:
            arity = len(rec[3])
        elif len(rec[3]) != arity:
            raise IngestError(
                f"record {i} (user {rec[0]!r}): numeric feature arity "
                f"{len(rec[3])} != dataset arity {arity}"
            )
        by_user.setdefault(rec[0], []).append(rec)
    sequences = []
    resorted = 0
    for user, rows in by_user.items():
        ts = [r[1] for r in rows]
        if any(b < a for a, b in zip(ts, ts[1:])):
            rows = sorted(rows, key=lambda r: r[1])  # stable: keeps file order on ties
            resorted += 1
        events = tuple(Event(t=t, category=vocab.encode(cat), numeric=num) for _, t, cat, num in rows)
        sequences.append(EventSequence(user_id=user, events=events))
    return Dataset(sequences=tuple(sequences), vocab=vocab, resorted=resorted)


def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    """Serialize one event per line in the ingestion schema."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for seq in dataset.sequences:
            for e in seq.events:
                obj: dict = {
                    "user_id": seq.user_id,
                    "t": e.t,
                    "cat": dataset.vocab.decode(e.category),
                }
                if e.numeric:
                    obj["num"] = list(e.numeric)
                fh.write(json.dumps(obj) + "\n")


def write_csv(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    arity = dataset.numeric_arity()
    header = ["user_id", "t", "cat"] + [f"num_{j}" for j in range(1, arity + 1)]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for seq in dataset.sequences:
            for e in seq.events:
                row = [seq.user_id, repr(e.t), dataset.vocab.decode(e.category)]
                row.extend(repr(v) for v in e.numeric)
                writer.writerow(row)
