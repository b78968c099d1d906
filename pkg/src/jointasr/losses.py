"""Training objectives: masked contrastive loss and CTC, with brute-force oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, _make

NEG_INF = -np.inf

POOL_OTHER_FRAMES = "other-frames"
POOL_NON_MASKED = "non-masked-frames"


class NoNegativesError(ValueError):
    pass


class AlignmentInfeasibleError(ValueError):
    pass


class OracleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    num_negatives: int = 100
    negative_pool: str = POOL_OTHER_FRAMES

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.num_negatives < 1:
            raise ValueError(f"num_negatives must be >= 1, got {self.num_negatives}")
        if self.negative_pool not in (POOL_OTHER_FRAMES, POOL_NON_MASKED):
            raise ValueError(f"unknown negative pool {self.negative_pool!r}")


@dataclass(frozen=True)
class CtcTarget:
    tokens: tuple[int, ...]
    utt_id: str = ""

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("CTC target must be nonempty")


# ---------------------------------------------------------------------------
# contrastive


def sample_negatives(plan, num_frames: int, anchor: int, cfg: ContrastiveConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw ``cfg.num_negatives`` distractor frames for ``anchor`` from the same utterance.

    Sampling is without replacement unless the pool is smaller than K.
    The non-masked pool falls back to all other frames when every frame is masked.
    """
    if num_frames < 2:
        raise NoNegativesError(f"utterance with {num_frames} frame(s) has no negatives")
    if anchor < 0 or anchor >= num_frames:
        raise IndexError(f"anchor {anchor} outside [0, {num_frames})")
    pool = None
    if cfg.negative_pool == POOL_NON_MASKED:
        keep = np.ones(num_frames, dtype=bool)
        keep[np.asarray(plan.indices, dtype=np.int64)] = False
        keep[anchor] = False
        if keep.any():
            pool = np.flatnonzero(keep)
    if pool is None:
        pool = np.concatenate([np.arange(anchor), np.arange(anchor + 1, num_frames)])
    k = cfg.num_negatives
    replace = len(pool) < k
    return rng.choice(pool, size=k, replace=replace)


def contrastive_loss(z: Tensor, z_ctx: Tensor, plan, cfg: ContrastiveConfig,
                     rng: np.random.Generator) -> Tensor:
    """Mean over masked frames of -log softmax over [positive, negatives] of cos/τ.

    Anchor is the context output at a masked frame, positive the unmasked
    encoder feature at the same frame, negatives encoder features at sampled
    frames. Gradients flow through both ``z`` and ``z_ctx``.
    """
    idx = np.asarray(plan.indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("contrastive_loss needs at least one masked frame")
    if z.shape != z_ctx.shape or z.ndim != 2:
        raise T.DimensionError(f"contrastive_loss: z {z.shape} vs context {z_ctx.shape}")
    num_frames = z.shape[0]
    if num_frames < 2:
        raise NoNegativesError("contrastive_loss needs at least two frames")
    cand = np.empty((idx.size, cfg.num_negatives + 1), dtype=np.int64)
    cand[:, 0] = idx
    for row, t in enumerate(idx):
        cand[row, 1:] = sample_negatives(plan, num_frames, int(t), cfg, rng)
    targets = T.embedding_select(z, cand)
    anchors = T.embedding_select(z_ctx, np.repeat(idx[:, None], cand.shape[1], axis=1))
    logits = T.scale(T.cosine_similarity(targets, anchors), 1.0 / cfg.temperature)
    return T.cross_entropy_from_logits(logits, np.zeros(idx.size, dtype=np.int64))


def contrastive_reference(z: np.ndarray, z_ctx: np.ndarray, plan, cfg: ContrastiveConfig,
                          rng: np.random.Generator) -> float:
    """Loop-based evaluation of the same loss, no graph; consumes ``rng`` identically."""
    num_frames = len(z)

    def cos(a, b):
        na = max(math.sqrt(sum(x * x for x in a)), 1e-8)
        nb = max(math.sqrt(sum(x * x for x in b)), 1e-8)
        return sum(x * y for x, y in zip(a, b)) / (na * nb)

    total = 0.0
    count = 0
    for t in plan.indices:
        negs = sample_negatives(plan, num_frames, int(t), cfg, rng)
        pos = math.exp(cos(z[t], z_ctx[t]) / cfg.temperature)
        denom = pos
        for tn in negs:
            denom += math.exp(cos(z[tn], z_ctx[t]) / cfg.temperature)
        total += -math.log(pos / denom)
        count += 1
    return total / count


# ---------------------------------------------------------------------------
# CTC


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def min_frames(tokens: Sequence[int]) -> int:
    """Shortest frame count admitting an alignment (repeats need a separating blank)."""
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return len(tokens) + repeats


def _ctc_tables(lp: np.ndarray, tokens: Sequence[int], blank: int):
    f = lp.shape[0]
    ext = np.full(2 * len(tokens) + 1, blank, dtype=np.int64)
    ext[1::2] = tokens
    s = len(ext)
    skip = np.zeros(s, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]  # F × S

    alpha = np.full((f, s), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, f):
        prev = alpha[t - 1]
        shift1 = np.concatenate(([NEG_INF], prev[:-1]))
        shift2 = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), NEG_INF)
        alpha[t] = _logsumexp3(prev, shift1, shift2) + emit[t]

    beta = np.full((f, s), NEG_INF)
    beta[f - 1, s - 1] = emit[f - 1, s - 1]
    if s > 1:
        beta[f - 1, s - 2] = emit[f - 1, s - 2]
    skip_next = np.zeros(s, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(f - 2, -1, -1):
        nxt = beta[t + 1]
        shift1 = np.concatenate((nxt[1:], [NEG_INF]))
        shift2 = np.where(skip_next, np.concatenate((nxt[2:], [NEG_INF, NEG_INF])), NEG_INF)
        beta[t] = _logsumexp3(nxt, shift1, shift2) + emit[t]
    return ext, alpha, beta, emit


def ctc_loss(logprobs: Tensor, target: CtcTarget | Sequence[int], blank: int) -> Tensor:
    """Negative log-probability of ``target`` under CTC, via the log-space alpha recursion.

    The gradient with respect to ``logprobs`` is minus the per-frame label
    occupancy from the alpha-beta product.
    """
    tokens = tuple(target.tokens if isinstance(target, CtcTarget) else target)
    if not tokens:
        raise ValueError("CTC target must be nonempty")
    if blank in tokens:
        raise ValueError("CTC target may not contain the blank id")
    lp = logprobs.data
    f, v = lp.shape
    if any(tok < 0 or tok >= v for tok in tokens):
        raise ValueError(f"CTC target ids must lie in [0, {v})")
    if f < min_frames(tokens):
        raise AlignmentInfeasibleError(
            f"{f} frames cannot align {len(tokens)} tokens (need {min_frames(tokens)})")
    ext, alpha, beta, emit = _ctc_tables(lp, tokens, blank)
    s = len(ext)
    tail = alpha[f - 1, s - 1] if s == 1 else np.logaddexp(alpha[f - 1, s - 1], alpha[f - 1, s - 2])
    if not np.isfinite(tail):
        raise AlignmentInfeasibleError("no valid CTC alignment")
    loss = -tail

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            occ = np.exp(alpha + beta - emit - tail)  # F × S
        occ = np.nan_to_num(occ)
        grad = np.zeros_like(lp)
        np.add.at(grad, (slice(None), ext), occ)  # add.at handles repeated columns
        return (-g * grad,)

    return _make(np.array(loss), (logprobs,), bw)


def ctc_bruteforce(logprobs: np.ndarray, target: Sequence[int], blank: int) -> float:
    """Enumerate every frame path and logsumexp those collapsing to ``target``."""
    lp = np.asarray(logprobs.data if isinstance(logprobs, Tensor) else logprobs, dtype=np.float64)
    f, v = lp.shape
    if v ** f > 10 ** 7:
        raise OracleSizeError(f"V^F = {v}^{f} exceeds the enumeration limit")
    tokens = np.asarray(tuple(target), dtype=np.int64)
    paths = np.indices((v,) * f).reshape(f, -1).T  # V^F × F
    scores = lp[np.arange(f), paths].sum(axis=1)
    prev = np.concatenate([np.full((len(paths), 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != blank) & (paths != prev)
    count = keep.sum(axis=1)
    pos = np.cumsum(keep, axis=1) - 1
    padded = np.concatenate([tokens, [-2]])
    want = padded[np.clip(pos, 0, len(tokens))]
    ok = (count == len(tokens)) & np.all(~keep | (paths == want), axis=1)
    if not ok.any():
        return math.inf
    sel = scores[ok]
    m = sel.max()
    return float(-(m + np.log(np.exp(sel - m).sum())))
