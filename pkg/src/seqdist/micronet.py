"""Minimal differentiable sequence backbone: embedding -> GRU -> heads.

Everything is float64 numpy with hand-written reverse-mode gradients so
gradient checks can be tight and training is bit-deterministic. Three
output heads share the recurrent trunk: a per-step next-token head, a
one-shot block head producing N rows at once, and a single-distribution
head.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import objectives
from .core import CategoricalDistribution, Dataset, derive_seed, token_array

_FIELDS = (
    "emb",
    "w_z", "u_z", "b_z",
    "w_r", "u_r", "b_r",
    "w_h", "u_h", "b_h",
    "w_step", "b_step",
    "w_block", "b_block",
    "w_dist", "b_dist",
)


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class ModelParameters:
    """All weights of the backbone plus heads, with a flat-vector view."""

    emb: np.ndarray      # (K, E)
    w_z: np.ndarray      # (H, E) update gate
    u_z: np.ndarray      # (H, H)
    b_z: np.ndarray      # (H,)
    w_r: np.ndarray      # (H, E) reset gate
    u_r: np.ndarray      # (H, H)
    b_r: np.ndarray      # (H,)
    w_h: np.ndarray      # (H, E) candidate state
    u_h: np.ndarray      # (H, H)
    b_h: np.ndarray      # (H,)
    w_step: np.ndarray   # (K, H) per-step logits
    b_step: np.ndarray   # (K,)
    w_block: np.ndarray  # (N*K, H) one-shot block logits
    b_block: np.ndarray  # (N*K,)
    w_dist: np.ndarray   # (K, H) single-distribution logits
    b_dist: np.ndarray   # (K,)

    @property
    def k(self) -> int:
        return self.emb.shape[0]

    @property
    def e(self) -> int:
        return self.emb.shape[1]

    @property
    def h(self) -> int:
        return self.w_z.shape[0]

    @property
    def n(self) -> int:
        return self.w_block.shape[0] // self.k

    @classmethod
    def initialize(
        cls, k: int, n: int, e: int = 32, h: int = 64, seed: int = 0
    ) -> "ModelParameters":
        """Weights uniform in +-1/sqrt(h), biases zero."""
        rng = np.random.default_rng(seed)
        s = 1.0 / math.sqrt(h)

        def w(*shape):
            return rng.uniform(-s, s, size=shape)

        return cls(
            emb=w(k, e),
            w_z=w(h, e), u_z=w(h, h), b_z=np.zeros(h),
            w_r=w(h, e), u_r=w(h, h), b_r=np.zeros(h),
            w_h=w(h, e), u_h=w(h, h), b_h=np.zeros(h),
            w_step=w(k, h), b_step=np.zeros(k),
            w_block=w(n * k, h), b_block=np.zeros(n * k),
            w_dist=w(k, h), b_dist=np.zeros(k),
        )

    @classmethod
    def zeros(cls, k: int, n: int, e: int, h: int) -> "ModelParameters":
        return cls(
            emb=np.zeros((k, e)),
            w_z=np.zeros((h, e)), u_z=np.zeros((h, h)), b_z=np.zeros(h),
            w_r=np.zeros((h, e)), u_r=np.zeros((h, h)), b_r=np.zeros(h),
            w_h=np.zeros((h, e)), u_h=np.zeros((h, h)), b_h=np.zeros(h),
            w_step=np.zeros((k, h)), b_step=np.zeros(k),
            w_block=np.zeros((n * k, h)), b_block=np.zeros(n * k),
            w_dist=np.zeros((k, h)), b_dist=np.zeros(k),
        )

    def zeros_like(self) -> "ModelParameters":
        return ModelParameters(**{f: np.zeros_like(getattr(self, f)) for f in _FIELDS})

    def copy(self) -> "ModelParameters":
        return ModelParameters(**{f: getattr(self, f).copy() for f in _FIELDS})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in _FIELDS])

    def with_vector(self, vec: np.ndarray) -> "ModelParameters":
        """Rebuild parameters of the same shapes from a flat float64 vector."""
        vec = np.asarray(vec, dtype=np.float64)
        out = {}
        pos = 0
        for f in _FIELDS:
            arr = getattr(self, f)
            out[f] = vec[pos : pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
        return ModelParameters(**out)

    def add_scaled(self, other: "ModelParameters", scale: float) -> None:
        for f in _FIELDS:
            getattr(self, f).__iadd__(getattr(other, f) * scale)


@dataclass
class TrainConfig:
    objective: str = "ntp"  # ntp | target | matched | dist
    e: int = 32
    h: int = 64
    lr: float = 0.5
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    m: int = 8            # matching band, matched objective only
    n: int = 32           # horizon/block length for block-style objectives
    optimizer: str = "sgd"  # sgd | adam

    def __post_init__(self) -> None:
        if self.objective not in ("ntp", "target", "matched", "dist"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if min(self.e, self.h, self.epochs, self.batch_size, self.n) < 1 or self.lr <= 0:
            raise ValueError("e, h, lr, epochs, batch_size, n must all be positive")
        if self.m < 0:
            raise ValueError("matching band must be >= 0")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _check_tokens(params: ModelParameters, tokens: np.ndarray) -> None:
    if tokens.size == 0:
        raise ValueError("token sequence must be non-empty")
    if tokens.min() < 0 or tokens.max() >= params.k:
        raise ValueError("category index out of embedding range")


def _gru_forward(params: ModelParameters, tokens: np.ndarray):
    """Hidden states for every step plus the cache needed for backprop."""
    t_len = tokens.size
    h_dim = params.h
    hs = np.empty((t_len, h_dim))
    zs = np.empty((t_len, h_dim))
    rs = np.empty((t_len, h_dim))
    cs = np.empty((t_len, h_dim))
    rhs = np.empty((t_len, h_dim))
    h = np.zeros(h_dim)
    for t in range(t_len):
        x = params.emb[tokens[t]]
        z = _sigmoid(params.w_z @ x + params.u_z @ h + params.b_z)
        r = _sigmoid(params.w_r @ x + params.u_r @ h + params.b_r)
        rh = r * h
        c = np.tanh(params.w_h @ x + params.u_h @ rh + params.b_h)
        h = (1.0 - z) * h + z * c
        zs[t], rs[t], cs[t], rhs[t], hs[t] = z, r, c, rh, h
    return hs, (zs, rs, cs, rhs)


def _gru_backward(
    params: ModelParameters,
    tokens: np.ndarray,
    hs: np.ndarray,
    cache,
    dhs: np.ndarray,
    grads: ModelParameters,
) -> None:
    """Backprop through time; ``dhs[t]`` is the direct dL/dh_t. In-place on grads."""
    zs, rs, cs, rhs = cache
    h_dim = params.h
    dh_next = np.zeros(h_dim)
    for t in range(tokens.size - 1, -1, -1):
        dh = dhs[t] + dh_next
        h_prev = hs[t - 1] if t > 0 else np.zeros(h_dim)
        z, r, c, rh = zs[t], rs[t], cs[t], rhs[t]
        x = params.emb[tokens[t]]

        dz = dh * (c - h_prev)
        dc = dh * z
        dh_prev = dh * (1.0 - z)

        da_c = dc * (1.0 - c * c)
        grads.w_h += np.outer(da_c, x)
        grads.u_h += np.outer(da_c, rh)
        grads.b_h += da_c
        drh = params.u_h.T @ da_c
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r

        da_r = dr * r * (1.0 - r)
        grads.w_r += np.outer(da_r, x)
        grads.u_r += np.outer(da_r, h_prev)
        grads.b_r += da_r
        dh_prev = dh_prev + params.u_r.T @ da_r

        da_z = dz * z * (1.0 - z)
        grads.w_z += np.outer(da_z, x)
        grads.u_z += np.outer(da_z, h_prev)
        grads.b_z += da_z
        dh_prev = dh_prev + params.u_z.T @ da_z

        dx = params.w_z.T @ da_z + params.w_r.T @ da_r + params.w_h.T @ da_c
        grads.emb[tokens[t]] += dx
        dh_next = dh_prev


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def forward_step_logits(params: ModelParameters, prefix) -> np.ndarray:
    """(T, K) logits; row t scores the event following x_{1:t+1}."""
    tokens = token_array(prefix)
    _check_tokens(params, tokens)
    hs, _ = _gru_forward(params, tokens)
    return hs @ params.w_step.T + params.b_step


def forward_block_logits(params: ModelParameters, prefix, n: int) -> np.ndarray:
    """(N, K) one-shot block logits, all rows conditioned on the prefix only."""
    if n != params.n:
        raise ValueError(f"block head is sized for n={params.n}, got {n}")
    tokens = token_array(prefix)
    _check_tokens(params, tokens)
    hs, _ = _gru_forward(params, tokens)
    flat = params.w_block @ hs[-1] + params.b_block
    return flat.reshape(params.n, params.k)


def forward_dist(params: ModelParameters, prefix) -> CategoricalDistribution:
    """Predicted distribution over categories from the final hidden state."""
    tokens = token_array(prefix)
    _check_tokens(params, tokens)
    hs, _ = _gru_forward(params, tokens)
    probs = objectives.softmax(params.w_dist @ hs[-1] + params.b_dist)
    return CategoricalDistribution(probs / probs.sum())


# ---------------------------------------------------------------------------
# Loss closures (value + full-parameter gradient)
# ---------------------------------------------------------------------------


def ntp_loss_and_grad(params: ModelParameters, tokens) -> tuple[float, ModelParameters]:
    """Mean next-token NLL over a sequence; needs length >= 2."""
    tokens = token_array(tokens)
    _check_tokens(params, tokens)
    if tokens.size < 2:
        raise ValueError("next-token loss needs at least two events")
    hs, cache = _gru_forward(params, tokens)
    rows = hs[:-1]
    targets = tokens[1:]
    logits = rows @ params.w_step.T + params.b_step
    loss = objectives.ntp_loss(logits, targets)

    dlogits = objectives.softmax(logits)
    dlogits[np.arange(targets.size), targets] -= 1.0
    dlogits /= targets.size
    grads = params.zeros_like()
    grads.w_step += dlogits.T @ rows
    grads.b_step += dlogits.sum(axis=0)
    dhs = np.zeros_like(hs)
    dhs[:-1] = dlogits @ params.w_step
    _gru_backward(params, tokens, hs, cache, dhs, grads)
    return loss, grads


def _block_forward(params: ModelParameters, context: np.ndarray):
    hs, cache = _gru_forward(params, context)
    flat = params.w_block @ hs[-1] + params.b_block
    return hs, cache, flat.reshape(params.n, params.k)


def _block_backward(
    params: ModelParameters,
    context: np.ndarray,
    hs: np.ndarray,
    cache,
    dlogits: np.ndarray,
    grads: ModelParameters,
) -> None:
    dflat = dlogits.reshape(-1)
    grads.w_block += np.outer(dflat, hs[-1])
    grads.b_block += dflat
    dhs = np.zeros_like(hs)
    dhs[-1] = params.w_block.T @ dflat
    _gru_backward(params, context, hs, cache, dhs, grads)


def target_loss_and_grad(
    params: ModelParameters, context, block
) -> tuple[float, ModelParameters]:
    context = token_array(context)
    block = token_array(block)
    _check_tokens(params, context)
    if block.size != params.n:
        raise ValueError(f"block must have length {params.n}")
    hs, cache, logits = _block_forward(params, context)
    loss = objectives.target_loss(logits, block)

    dlogits = objectives.softmax(logits)
    dlogits[np.arange(block.size), block] -= 1.0
    grads = params.zeros_like()
    _block_backward(params, context, hs, cache, dlogits, grads)
    return loss, grads


def matched_loss_and_grad(
    params: ModelParameters, context, block, m: int
) -> tuple[float, ModelParameters, objectives.MatchResult]:
    """Banded-assignment loss; gradient flows only through matched rows."""
    context = token_array(context)
    block = token_array(block)
    _check_tokens(params, context)
    if block.size != params.n:
        raise ValueError(f"block must have length {params.n}")
    hs, cache, logits = _block_forward(params, context)
    loss, match = objectives.matched_loss(logits, block, m)

    probs = objectives.softmax(logits)
    dlogits = np.zeros_like(logits)
    for i, j in enumerate(match.sigma):
        dlogits[j] += probs[j]
        dlogits[j, block[i]] -= 1.0
    grads = params.zeros_like()
    _block_backward(params, context, hs, cache, dlogits, grads)
    return loss, grads, match


def dist_loss_and_grad(
    params: ModelParameters, context, window
) -> tuple[float, ModelParameters]:
    """KL from the window's empirical distribution to the predicted simplex point."""
    context = token_array(context)
    window = token_array(window)
    _check_tokens(params, context)
    if window.size == 0:
        raise ValueError("window must be non-empty")
    hs, cache = _gru_forward(params, context)
    logits = params.w_dist @ hs[-1] + params.b_dist
    pi = objectives.softmax(logits)
    p_hat = np.bincount(window, minlength=params.k) / window.size
    loss = objectives.dist_kl_loss(pi, p_hat)

    du = pi - p_hat
    grads = params.zeros_like()
    grads.w_dist += np.outer(du, hs[-1])
    grads.b_dist += du
    dhs = np.zeros_like(hs)
    dhs[-1] = params.w_dist.T @ du
    _gru_backward(params, context, hs, cache, dhs, grads)
    return loss, grads


def horizon_uniform_loss_and_grad(
    params: ModelParameters, context, window
) -> tuple[float, ModelParameters]:
    """Mean NLL of all window tokens under the final per-step distribution."""
    context = token_array(context)
    window = token_array(window)
    _check_tokens(params, context)
    if window.size == 0:
        raise ValueError("window must be non-empty")
    hs, cache = _gru_forward(params, context)
    row = params.w_step @ hs[-1] + params.b_step
    loss = objectives.horizon_uniform_loss(row, window)

    du = objectives.softmax(row) - np.bincount(window, minlength=params.k) / window.size
    grads = params.zeros_like()
    grads.w_step += np.outer(du, hs[-1])
    grads.b_step += du
    dhs = np.zeros_like(hs)
    dhs[-1] = params.w_step.T @ du
    _gru_backward(params, context, hs, cache, dhs, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def grad_check(
    params: ModelParameters,
    loss_closure: Callable[[ModelParameters], tuple[float, ModelParameters]],
    epsilon: float = 1e-6,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between the closure's gradient and central differences.

    Checks a random subset of coordinates of the flat parameter vector; the
    relative error denominator is floored at 1 so near-zero coordinates are
    compared absolutely.
    """
    loss0, grads = loss_closure(params)
    if not math.isfinite(loss0):
        raise ValueError("loss is not finite")
    vec = params.to_vector()
    gvec = grads.to_vector()
    rng = np.random.default_rng(seed)
    count = min(n_coords, vec.size)
    coords = rng.choice(vec.size, size=count, replace=False)
    worst = 0.0
    for i in coords:
        bumped = vec.copy()
        bumped[i] = vec[i] + epsilon
        plus, _ = loss_closure(params.with_vector(bumped))
        bumped[i] = vec[i] - epsilon
        minus, _ = loss_closure(params.with_vector(bumped))
        fd = (plus - minus) / (2.0 * epsilon)
        rel = abs(gvec[i] - fd) / max(abs(gvec[i]), abs(fd), 1.0)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _build_items(dataset: Dataset, config: TrainConfig) -> list:
    items = []
    if config.objective == "ntp":
        for seq in dataset.sequences:
            if len(seq) >= 2:
                items.append(seq.categories())
    else:
        for seq in dataset.sequences:
            cats = seq.categories()
            if cats.size >= config.n + 1:
                items.append((cats[: -config.n], cats[-config.n :]))
    if not items:
        raise ValueError(
            f"no sequence is long enough to train objective {config.objective!r}"
        )
    return items


def _item_loss_and_grad(params, config: TrainConfig, item):
    if config.objective == "ntp":
        return ntp_loss_and_grad(params, item)
    context, block = item
    if config.objective == "target":
        return target_loss_and_grad(params, context, block)
    if config.objective == "matched":
        loss, grads, _ = matched_loss_and_grad(params, context, block, config.m)
        return loss, grads
    return dist_loss_and_grad(params, context, block)


class _AdamState:
    def __init__(self, params: ModelParameters):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def update(self, params: ModelParameters, grads: ModelParameters, lr: float) -> None:
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for f in _FIELDS:
            g = getattr(grads, f)
            m = getattr(self.m, f)
            v = getattr(self.v, f)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            step = lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
            getattr(params, f).__isub__(step)


def train(dataset: Dataset, config: TrainConfig) -> tuple[ModelParameters, list[float]]:
    """Minibatch gradient descent; returns final parameters and per-epoch mean loss.

    Deterministic given the seed: data order, initialization and updates all
    derive from it. A non-finite loss aborts with TrainingDiverged.
    """
    items = _build_items(dataset, config)
    params = ModelParameters.initialize(
        k=dataset.vocab.size,
        n=config.n,
        e=config.e,
        h=config.h,
        seed=derive_seed(config.seed, "init"),
    )
    order_rng = np.random.default_rng(derive_seed(config.seed, "order"))
    adam = _AdamState(params) if config.optimizer == "adam" else None
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(items))
        epoch_losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            accum = params.zeros_like()
            for idx in batch:
                loss, grads = _item_loss_and_grad(params, config, items[idx])
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, item {int(idx)}: {loss!r}"
                    )
                epoch_losses.append(loss)
                accum.add_scaled(grads, 1.0 / batch.size)
            if adam is not None:
                adam.update(params, accum, config.lr)
            else:
                params.add_scaled(accum, -config.lr)
        trace.append(math.fsum(epoch_losses) / len(epoch_losses))
    return params, trace


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParameters, path: str | Path, meta: dict | None = None) -> None:
    """JSON header line (dims + metadata) followed by the flat little-endian vector."""
    path = Path(path)
    header = {"k": params.k, "e": params.e, "h": params.h, "n": params.n, "meta": meta or {}}
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.to_vector().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParameters, dict]:
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    skeleton = ModelParameters.zeros(header["k"], header["n"], header["e"], header["h"])
    vec = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return skeleton.with_vector(vec), header.get("meta", {})
