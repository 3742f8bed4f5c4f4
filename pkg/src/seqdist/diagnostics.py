"""Pre-training dataset diagnostics.

Quantifies how a sequence's per-window feature distribution drifts over
time (drift curves against the first window, multi-anchor staticity) and
how steeply the global category frequencies decay.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .core import (
    CategoricalDistribution,
    Dataset,
    Event,
    EventSequence,
    derive_seed,
)


@dataclass(frozen=True)
class WindowSpec:
    """Sliding window of ``width`` events advanced by ``stride`` events."""

    width: int = 64
    stride: int = 32

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError("window width must be >= 1")
        if not 1 <= self.stride <= self.width:
            raise ValueError("stride must satisfy 1 <= stride <= width")


@dataclass(frozen=True)
class DriftCurve:
    """Shape similarity of every window against the first window."""

    values: tuple[float, ...]


@dataclass(frozen=True)
class DatasetSummary:
    decay_lambda: float
    staticity: float
    tcd: int
    mean_len: float
    ppl_ratio: float | None = None


def tv_similarity(
    p: CategoricalDistribution | np.ndarray, q: CategoricalDistribution | np.ndarray
) -> float:
    """1 minus the total variation distance between two categorical vectors."""
    pa = p.probs if isinstance(p, CategoricalDistribution) else np.asarray(p, dtype=np.float64)
    qa = q.probs if isinstance(q, CategoricalDistribution) else np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape:
        raise ValueError(f"dimension mismatch: {pa.shape} vs {qa.shape}")
    return 1.0 - 0.5 * float(np.abs(pa - qa).sum())


def ks_similarity(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> float:
    """1 minus the two-sample Kolmogorov-Smirnov statistic."""
    xs = np.sort(np.asarray(x, dtype=np.float64))
    ys = np.sort(np.asarray(y, dtype=np.float64))
    if xs.size == 0 or ys.size == 0:
        raise ValueError("KS similarity needs two non-empty samples")
    pooled = np.concatenate([xs, ys])
    fx = np.searchsorted(xs, pooled, side="right") / xs.size
    fy = np.searchsorted(ys, pooled, side="right") / ys.size
    return 1.0 - float(np.max(np.abs(fx - fy)))


def _aligned_categorical(vals_a: list, vals_b: list) -> tuple[np.ndarray, np.ndarray]:
    """Empirical distributions of two samples over their joint support."""
    support = sorted(set(vals_a) | set(vals_b))
    pos = {v: i for i, v in enumerate(support)}
    pa = np.zeros(len(support))
    pb = np.zeros(len(support))
    for v in vals_a:
        pa[pos[v]] += 1.0
    for v in vals_b:
        pb[pos[v]] += 1.0
    return pa / len(vals_a), pb / len(vals_b)


def _feature_values(window: Sequence[Event], j: int) -> list:
    if j == 0:
        return [e.category for e in window]
    return [e.numeric[j - 1] for e in window]


def shape_score(
    win_a: Sequence[Event],
    win_b: Sequence[Event],
    feature_kinds: Sequence[str] | None = None,
) -> float:
    """Mean per-feature similarity between two event windows.

    Feature 0 is the category (total-variation similarity); the remaining
    features are the events' numeric columns (KS similarity). An explicit
    ``feature_kinds`` list overrides the per-feature treatment.
    """
    if len(win_a) == 0 or len(win_b) == 0:
        raise ValueError("shape score needs two non-empty windows")
    arity_a = len(win_a[0].numeric)
    arity_b = len(win_b[0].numeric)
    if arity_a != arity_b:
        raise ValueError(f"feature schema mismatch: arity {arity_a} vs {arity_b}")
    kinds = list(feature_kinds) if feature_kinds is not None else ["categorical"] + ["numeric"] * arity_a
    if len(kinds) != 1 + arity_a:
        raise ValueError(f"expected {1 + arity_a} feature kinds, got {len(kinds)}")
    sims = []
    for j, kind in enumerate(kinds):
        va, vb = _feature_values(win_a, j), _feature_values(win_b, j)
        if kind == "categorical":
            pa, pb = _aligned_categorical(va, vb)
            sims.append(tv_similarity(pa, pb))
        elif kind == "numeric":
            sims.append(ks_similarity(va, vb))
        else:
            raise ValueError(f"unknown feature kind {kind!r}")
    return float(np.mean(sims))


def sequence_windows(seq: EventSequence, spec: WindowSpec) -> list[tuple[Event, ...]]:
    """All full windows; a short tail (< width events) is dropped."""
    t = len(seq)
    if t < spec.width:
        raise ValueError(f"sequence length {t} < window width {spec.width}")
    return [
        seq.events[start : start + spec.width]
        for start in range(0, t - spec.width + 1, spec.stride)
    ]


def drift_curve(seq: EventSequence, spec: WindowSpec) -> DriftCurve:
    """Shape similarity of each window against the first window."""
    wins = sequence_windows(seq, spec)
    first = wins[0]
    return DriftCurve(values=tuple(shape_score(first, w) for w in wins))


def staticity_sequence(
    seq: EventSequence,
    spec: WindowSpec,
    r: int = 3,
    seed: int = 0,
    anchors: Sequence[int] | None = None,
) -> float:
    """Average shape similarity between random anchor windows and all windows.

    Anchors are drawn uniformly with replacement; the inner sum includes the
    anchor itself (similarity 1). ``anchors`` overrides the draw, for oracles.
    """
    if r < 1:
        raise ValueError("anchor count must be >= 1")
    wins = sequence_windows(seq, spec)
    n_win = len(wins)
    if anchors is None:
        rng = np.random.default_rng(seed)
        anchors = rng.integers(0, n_win, size=r)
    else:
        anchors = list(anchors)
        if len(anchors) != r:
            raise ValueError("anchors override must have length r")
    total = 0.0
    for a in anchors:
        ref = wins[int(a)]
        for w in wins:
            total += shape_score(ref, w)
    return total / (r * n_win)


def staticity_dataset(
    dataset: Dataset, spec: WindowSpec, r: int = 3, seed: int = 0
) -> float:
    """Mean per-sequence staticity; sequences shorter than one window are skipped."""
    scores, _ = staticity_scores(dataset, spec, r=r, seed=seed)
    if not scores:
        raise ValueError("no sequence is long enough for the window spec")
    return float(np.mean([s for _, s in scores]))


def staticity_scores(
    dataset: Dataset, spec: WindowSpec, r: int = 3, seed: int = 0
) -> tuple[list[tuple[str, float]], int]:
    """Per-sequence staticity scores plus the count of skipped short sequences."""
    scores = []
    skipped = 0
    for seq in dataset.sequences:
        if len(seq) < spec.width:
            skipped += 1
            continue
        seq_seed = derive_seed(seed, "staticity", seq.user_id)
        scores.append((seq.user_id, staticity_sequence(seq, spec, r=r, seed=seq_seed)))
    return scores, skipped


def fit_decay_lambda_from_freqs(freqs: Sequence[float] | np.ndarray) -> float:
    """Exponential decay rate of rank-sorted frequencies.

    Fits log f_r = log f_1 - lambda * (r - 1) by least squares over the
    positive-frequency ranks, with the intercept anchored at the top rank;
    the result is clipped at zero.
    """
    f = np.sort(np.asarray(freqs, dtype=np.float64))[::-1]
    if f.size < 2:
        raise ValueError("decay fit needs at least two categories")
    f = f[f > 0]
    if f.size < 2:
        return 0.0
    ranks = np.arange(f.size, dtype=np.float64)  # r - 1
    logf = np.log(f)
    slope = float(np.dot(ranks, logf - logf[0]) / np.dot(ranks, ranks))
    return max(0.0, -slope)


def fit_decay_lambda(dataset: Dataset) -> float:
    """Decay rate fitted to the dataset's global category frequencies."""
    k = dataset.vocab.size
    if k < 2:
        raise ValueError("decay fit needs at least two categories")
    counts = np.zeros(k, dtype=np.float64)
    for seq in dataset.sequences:
        counts += np.bincount(seq.categories(), minlength=k)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty dataset")
    return fit_decay_lambda_from_freqs(counts / total)


def dataset_summary(
    dataset: Dataset, spec: WindowSpec | None = None, r: int = 3, seed: int = 0
) -> DatasetSummary:
    """Headline dataset statistics; ppl_ratio stays unset until a model exists."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    spec = spec or WindowSpec()
    if dataset.vocab.size < 2:
        lam = 0.0  # single-category data: the fit itself is an error path
    else:
        lam = fit_decay_lambda(dataset)
    return DatasetSummary(
        decay_lambda=lam,
        staticity=staticity_dataset(dataset, spec, r=r, seed=seed),
        tcd=dataset.vocab.size,
        mean_len=float(np.mean([len(s) for s in dataset.sequences])),
    )


def drift_rows(dataset: Dataset, spec: WindowSpec) -> Iterator[tuple[str, int, float]]:
    """(user_id, window_index, shape) rows for every long-enough sequence."""
    for seq in dataset.sequences:
        if len(seq) < spec.width:
            continue
        for i, v in enumerate(drift_curve(seq, spec).values):
            yield seq.user_id, i, v
