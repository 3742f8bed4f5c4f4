"""Seeded local/global permutation of events for order-sensitivity probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, Event, EventSequence, derive_seed


@dataclass(frozen=True)
class ShuffleSpec:
    """Window half-width ``w``: 0 = identity, -1 = full shuffle, w>0 = local."""

    w: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.w < -1:
            raise ValueError("shuffle width must be >= -1")


def permuted_indices(t: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Index permutation for a length-``t`` sequence under the shuffle scheme.

    w = -1 is a uniform Fisher-Yates permutation. w > 0 is one left-to-right
    pass swapping each position with a uniform index in its +-w neighborhood.
    """
    perm = np.arange(t, dtype=np.int64)
    if w == 0 or t <= 1:
        return perm
    if w == -1:
        for i in range(t - 1, 0, -1):
            j = int(rng.integers(0, i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
    for pos in range(t):
        lo = max(0, pos - w)
        hi = min(t - 1, pos + w)
        j = int(rng.integers(lo, hi + 1))
        perm[pos], perm[j] = perm[j], perm[pos]
    return perm


def local_shuffle(seq: EventSequence, spec: ShuffleSpec) -> EventSequence:
    """Permute event payloads while keeping the original time grid in place.

    The category (and numeric features) move with the event; the timestamp
    at each position stays, so output timestamps remain non-decreasing.
    """
    if spec.w == 0:
        return seq
    rng = np.random.default_rng(spec.seed)
    perm = permuted_indices(len(seq), spec.w, rng)
    events = tuple(
        Event(t=seq.events[pos].t, category=seq.events[src].category, numeric=seq.events[src].numeric)
        for pos, src in enumerate(perm)
    )
    return EventSequence(user_id=seq.user_id, events=events)


def shuffle_dataset(dataset: Dataset, w: int, seed: int) -> Dataset:
    """Shuffle every sequence with a per-user derived seed (order independent)."""
    sequences = tuple(
        local_shuffle(seq, ShuffleSpec(w=w, seed=derive_seed(seed, "shuffle", seq.user_id)))
        for seq in dataset.sequences
    )
    return Dataset(sequences=sequences, vocab=dataset.vocab, resorted=dataset.resorted)
