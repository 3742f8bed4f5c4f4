"""Training losses over model logits, and the banded assignment solver.

All losses are plain functions of logits/targets so they can be checked
against hand oracles; gradient plumbing lives with the model.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CategoricalDistribution, token_array

# Finite stand-in for +inf outside the assignment band; keeps the solver's
# arithmetic well defined while never being part of an optimal solution.
BAND_SENTINEL = 1e12


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax, stable for large logits."""
    x = np.asarray(logits, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def ntp_loss(step_logits: np.ndarray, targets) -> float:
    """Mean next-token cross-entropy: row t scores target t."""
    logits = np.asarray(step_logits, dtype=np.float64)
    tgt = token_array(targets)
    if logits.ndim != 2 or logits.shape[0] != tgt.size:
        raise ValueError(f"shape mismatch: {logits.shape} logits vs {tgt.size} targets")
    ls = log_softmax(logits)
    return -math.fsum(ls[i, tgt[i]] for i in range(tgt.size)) / tgt.size


def target_loss(block_logits: np.ndarray, horizon) -> float:
    """Summed cross-entropy of a one-shot block prediction at the true order."""
    logits = np.asarray(block_logits, dtype=np.float64)
    tgt = token_array(horizon)
    if logits.ndim != 2 or logits.shape[0] != tgt.size:
        raise ValueError(f"shape mismatch: {logits.shape} logits vs {tgt.size} targets")
    ls = log_softmax(logits)
    return -math.fsum(ls[i, tgt[i]] for i in range(tgt.size))


@dataclass(frozen=True)
class MatchResult:
    """Target-to-prediction assignment: ``sigma[i]`` is the row scoring target i."""

    sigma: tuple[int, ...]
    cost: float

    def __post_init__(self) -> None:
        n = len(self.sigma)
        if sorted(self.sigma) != list(range(n)):
            raise ValueError("assignment is not a bijection")


def matched_loss(
    block_logits: np.ndarray, horizon, m: int
) -> tuple[float, MatchResult]:
    """Block cross-entropy minimized over band-limited target permutations.

    Entry (i, j) of the cost matrix is the NLL of target i under prediction
    row j; rows farther than ``m`` positions away are excluded.
    """
    if m < 0:
        raise ValueError("band width must be >= 0")
    logits = np.asarray(block_logits, dtype=np.float64)
    tgt = token_array(horizon)
    if logits.ndim != 2 or logits.shape[0] != tgt.size:
        raise ValueError(f"shape mismatch: {logits.shape} logits vs {tgt.size} targets")
    ls = log_softmax(logits)
    cost = -ls[:, tgt].T  # cost[i, j] = -log p_j(target_i)
    match = hungarian_band(cost, m)
    return match.cost, match


def dist_kl_loss(
    pi: CategoricalDistribution | np.ndarray, p_hat: CategoricalDistribution | np.ndarray
) -> float:
    """KL divergence from the empirical distribution to the predicted one."""
    q = pi.probs if isinstance(pi, CategoricalDistribution) else np.asarray(pi, dtype=np.float64)
    p = p_hat.probs if isinstance(p_hat, CategoricalDistribution) else np.asarray(p_hat, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {p.shape}")
    terms = []
    for k in range(p.size):
        if p[k] == 0.0:
            continue
        if q[k] <= 0.0:
            raise ValueError(f"predicted probability is 0 at supported category {k}")
        terms.append(p[k] * (math.log(p[k]) - math.log(q[k])))
    return math.fsum(terms)


def horizon_uniform_loss(step_logits_row: np.ndarray, window) -> float:
    """Mean NLL of every window token under one predictive distribution."""
    row = np.asarray(step_logits_row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("expected a single logits row")
    tokens = token_array(window)
    if tokens.size == 0:
        raise ValueError("window must be non-empty")
    ls = log_softmax(row)
    return -math.fsum(ls[t] for t in tokens) / tokens.size


# ---------------------------------------------------------------------------
# Banded assignment
# ---------------------------------------------------------------------------


def _solve_assignment(a: np.ndarray) -> tuple[list[int], list[float], list[float]]:
    """Exact minimum-cost square assignment (shortest augmenting paths).

    Returns (row_to_col, row_potentials, col_potentials); potentials are
    1-indexed with a dummy slot 0 and certify optimality via reduced costs.
    """
    n = a.shape[0]
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row matched to column j (1-indexed)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            row = a[i0 - 1]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u, v


def _band_cols(i: int, n: int, m: int) -> range:
    return range(max(0, i - m), min(n - 1, i + m) + 1)


def _assignment_cost(cost: np.ndarray, sigma: Sequence[int]) -> float:
    return math.fsum(cost[i, sigma[i]] for i in range(len(sigma)))


def hungarian_band(cost: np.ndarray, m: int) -> MatchResult:
    """Optimal assignment under the band constraint |sigma(i) - i| <= m.

    Exact ties between optimal assignments are broken toward the
    lexicographically smallest sigma. Entries outside the band are ignored;
    non-finite entries inside the band are an error.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("cost matrix must be square")
    if m < 0:
        raise ValueError("band width must be >= 0")
    n = c.shape[0]
    offsets = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    band = offsets <= m
    if not np.all(np.isfinite(c[band])):
        raise ValueError("non-finite cost inside the assignment band")
    work = np.where(band, c, BAND_SENTINEL)
    sigma, u, v = _solve_assignment(work)
    assert all(abs(i - j) <= m for i, j in enumerate(sigma)), "matched outside band"
    sigma = _lexicographic_refine(work, sigma, u, v, m)
    return MatchResult(sigma=tuple(sigma), cost=_assignment_cost(c, sigma))


def _lexicographic_refine(
    work: np.ndarray, sigma: list[int], u: list[float], v: list[float], m: int
) -> list[int]:
    """Among exactly optimal assignments, pick the lexicographically smallest.

    Row by row, a smaller column is adopted only if some completion keeps the
    total equal to the optimum. Candidates are screened with the solver's dual
    potentials (edges with positive reduced cost lie on no optimal assignment),
    so untied instances pass through with no extra solves.
    """
    n = len(sigma)
    best = _assignment_cost(work, sigma)
    slack_tol = 1e-9 * max(1.0, float(np.max(np.abs(work[work < BAND_SENTINEL]), initial=1.0)))
    current = list(sigma)
    used: set[int] = set()
    for i in range(n):
        for j in _band_cols(i, n, m):
            if j >= current[i]:
                break
            if j in used:
                continue
            if work[i, j] - u[i + 1] - v[j + 1] > slack_tol:
                continue
            candidate = _try_fix(work, current, used, i, j, best)
            if candidate is not None:
                current = candidate
                break
        used.add(current[i])
    return current


def _try_fix(
    work: np.ndarray, current: list[int], used: set[int], i: int, j: int, best: float
) -> list[int] | None:
    """Complete rows > i optimally with row i pinned to column j.

    Returns the full assignment if its exact cost equals the optimum.
    """
    n = len(current)
    rows = list(range(i + 1, n))
    cols = [cc for cc in range(n) if cc not in used and cc != j]
    fixed = [current[r] for r in range(i)] + [j]
    if rows:
        sub = work[np.ix_(rows, cols)]
        sub_sigma, _, _ = _solve_assignment(sub)
        completion = [cols[sc] for sc in sub_sigma]
    else:
        completion = []
    candidate = fixed + completion
    if _assignment_cost(work, candidate) == best:
        return candidate
    return None
