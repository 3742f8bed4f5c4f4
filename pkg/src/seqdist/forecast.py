"""Decoders and reference baselines that emit fixed-length forecasts."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import objectives
from .core import CategoricalDistribution, ForecastTask, token_array
from .micronet import ModelParameters, _check_tokens, _gru_forward, _sigmoid


@dataclass(frozen=True)
class Forecast:
    """Exactly-N predicted category indices plus the producing method tag."""

    tokens: tuple[int, ...]
    source: str
    user_id: str = ""


def _step_hidden(params: ModelParameters, h: np.ndarray, tok: int) -> np.ndarray:
    x = params.emb[tok]
    z = _sigmoid(params.w_z @ x + params.u_z @ h + params.b_z)
    r = _sigmoid(params.w_r @ x + params.u_r @ h + params.b_r)
    c = np.tanh(params.w_h @ x + params.u_h @ (r * h) + params.b_h)
    return (1.0 - z) * h + z * c


def _draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    return int(rng.choice(probs.size, p=probs / probs.sum()))


def decode_autoregressive(
    params: ModelParameters, prefix, n: int, mode: str = "greedy", seed: int = 0
) -> Forecast:
    """Generate N tokens feeding each emitted token back as the next input.

    Greedy takes the argmax at every step (ties to the lowest index);
    sampling draws from the predictive distribution with the given seed.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    tokens = token_array(prefix)
    _check_tokens(params, tokens)
    rng = np.random.default_rng(seed)
    hs, _ = _gru_forward(params, tokens)
    h = hs[-1]
    out = []
    for _ in range(n):
        logits = params.w_step @ h + params.b_step
        if mode == "greedy":
            tok = int(np.argmax(logits))
        else:
            tok = _draw(rng, objectives.softmax(logits))
        out.append(tok)
        h = _step_hidden(params, h, tok)
    uid = prefix.user_id if hasattr(prefix, "user_id") else ""
    return Forecast(tokens=tuple(out), source=f"model:ar:{mode}", user_id=uid)


def decode_block(
    params: ModelParameters, prefix, n: int, mode: str = "greedy", seed: int = 0
) -> Forecast:
    """Per-position argmax or sampling from the one-shot block rows."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    from .micronet import forward_block_logits

    logits = forward_block_logits(params, prefix, n)
    rng = np.random.default_rng(seed)
    if mode == "greedy":
        out = [int(np.argmax(row)) for row in logits]
    else:
        out = [_draw(rng, p) for p in objectives.softmax(logits)]
    uid = prefix.user_id if hasattr(prefix, "user_id") else ""
    return Forecast(tokens=tuple(out), source=f"model:block:{mode}", user_id=uid)


def hamilton_counts(pi: CategoricalDistribution | np.ndarray, length: int) -> np.ndarray:
    """Integer category counts apportioned by the largest-remainder rule.

    Each count is the floored quota length*pi_k, with the leftover slots
    going to the largest fractional remainders (ties to the lower index);
    the counts always sum to ``length`` exactly.
    """
    if length < 0:
        raise ValueError("length must be >= 0")
    probs = pi.probs if isinstance(pi, CategoricalDistribution) else CategoricalDistribution(pi).probs
    quotas = length * probs
    counts = np.floor(quotas).astype(np.int64)
    remainders = quotas - counts
    leftover = int(length - counts.sum())
    if leftover > 0:
        order = np.lexsort((np.arange(probs.size), -remainders))
        counts[order[:leftover]] += 1
    return counts


def decode_dist(
    pi: CategoricalDistribution | np.ndarray,
    n: int,
    seed: int = 0,
    order: str = "random",
    user_id: str = "",
) -> Forecast:
    """Emit the Hamilton multiset of ``pi`` in a seeded order.

    ``order`` is "random" (uniform permutation), "sorted" (by index) or
    "round_robin" (cycles through categories with remaining counts); the
    multiset is identical for all three.
    """
    counts = hamilton_counts(pi, n)
    multiset = np.repeat(np.arange(counts.size), counts)
    if order == "random":
        rng = np.random.default_rng(seed)
        tokens = multiset[rng.permutation(multiset.size)]
    elif order == "sorted":
        tokens = multiset
    elif order == "round_robin":
        remaining = counts.copy()
        seq = []
        while len(seq) < n:
            for k in range(counts.size):
                if remaining[k] > 0:
                    seq.append(k)
                    remaining[k] -= 1
        tokens = np.asarray(seq, dtype=np.int64)
    else:
        raise ValueError(f"unknown emission order {order!r}")
    return Forecast(tokens=tuple(int(t) for t in tokens), source=f"model:dist:{order}", user_id=user_id)


def baseline_forecast(
    kind: str,
    task: ForecastTask,
    seed: int = 0,
    smoothing: float = 0.0,
    k: int | None = None,
) -> Forecast:
    """The four reference baselines.

    gt copies the horizon; mode repeats the most frequent prefix category;
    repeat copies the last N prefix events (tiling the prefix when shorter);
    hist draws i.i.d. from the prefix histogram over ``k`` categories
    (defaulting to the largest prefix index + 1), with optional Laplace
    smoothing.
    """
    n = task.n
    uid = task.user_id
    if kind == "gt":
        tokens = tuple(int(t) for t in task.horizon.categories())
        return Forecast(tokens=tokens, source="baseline:gt", user_id=uid)
    prefix = task.prefix.categories()
    if prefix.size == 0:
        raise ValueError(f"baseline {kind!r} needs a non-empty prefix")
    if kind == "mode":
        counts = Counter(prefix.tolist())
        top = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))[0]
        return Forecast(tokens=(int(top),) * n, source="baseline:mode", user_id=uid)
    if kind == "repeat":
        if prefix.size >= n:
            tokens = prefix[-n:]
        else:
            reps = -(-n // prefix.size)
            tokens = np.tile(prefix, reps)[:n]
        return Forecast(tokens=tuple(int(t) for t in tokens), source="baseline:repeat", user_id=uid)
    if kind == "hist":
        k = int(prefix.max()) + 1
        counts = np.bincount(prefix, minlength=k).astype(np.float64) + smoothing
        probs = counts / counts.sum()
        rng = np.random.default_rng(seed)
        tokens = rng.choice(k, size=n, p=probs)
        return Forecast(tokens=tuple(int(t) for t in tokens), source="baseline:hist", user_id=uid)
    raise ValueError(f"unknown baseline {kind!r}")
