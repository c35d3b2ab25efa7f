"""Stochastic top-K ranking policy over site scores.

Sites are drawn one at a time without replacement with probability
softmax(q) over the sites still available. The policy's action is the
unordered top-K set; its probability sums the K! draw orders of that set.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

MAX_ENUMERABLE_K = 8
LOGPROB_MODES = ("estimate", "exact", "ordered")


@dataclass(frozen=True)
class SampledRanking:
    order: np.ndarray
    K: int
    perm_draw: np.ndarray
    log_prob_estimate: float = float("nan")

    @property
    def top_k(self) -> frozenset:
        return frozenset(int(i) for i in self.order[: self.K])


def _logsumexp(x: np.ndarray, axis=-1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _tail_order(q: np.ndarray, taken: np.ndarray) -> np.ndarray:
    rest = np.setdiff1d(np.arange(q.size), taken, assume_unique=False)
    return rest[np.argsort(-q[rest], kind="stable")]


def sample_orders(q, K: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent sequential draws; returns (n, M) full orders.

    Positions 0..K-1 are the sampled sites; the rest follow in descending
    score order (ties by index).
    """
    q = np.asarray(q, dtype=np.float64)
    M = q.size
    if K > M:
        raise ValueError(f"K={K} exceeds M={M}")
    if not np.all(np.isfinite(q)):
        raise ValueError("scores must be finite")
    logits = np.tile(q - q.max(), (n, 1))
    taken = np.empty((n, K), dtype=np.int64)
    rows = np.arange(n)
    for j in range(K):
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        cdf = np.cumsum(p, axis=1)
        u = rng.random(n) * cdf[:, -1]
        pick = np.minimum((cdf <= u[:, None]).sum(axis=1), M - 1)
        # guard against landing on an already-drawn site at a flat CDF step
        while True:
            bad = np.isneginf(logits[rows, pick])
            if not bad.any():
                break
            pick[bad] -= 1
        taken[:, j] = pick
        logits[rows, pick] = -np.inf
    tail_rank = np.argsort(-q, kind="stable")
    orders = np.empty((n, M), dtype=np.int64)
    orders[:, :K] = taken
    if K < M:
        in_top = np.zeros((n, M), dtype=bool)
        in_top[rows[:, None], taken] = True
        rest = ~in_top[:, tail_rank]
        orders[:, K:] = np.broadcast_to(tail_rank, (n, M))[rest].reshape(n, M - K)
    return orders


def sample_ranking(q, K: int, rng: np.random.Generator) -> SampledRanking:
    order = sample_orders(q, K, 1, rng)[0]
    perm = rng.permutation(K)
    return SampledRanking(order, K, perm)


def order_log_prob(q: np.ndarray, prefix: Sequence[int]) -> float:
    """log P(drawing ``prefix`` in that order) under sequential softmax."""
    q = np.asarray(q, dtype=np.float64)
    alive = np.ones(q.size, dtype=bool)
    total = 0.0
    for i in prefix:
        total += q[i] - float(_logsumexp(q[alive]))
        alive[i] = False
    return total


def exact_combination_probability(q, combo, K: int | None = None) -> float:
    """Sum over all K! draw orders of ``combo``."""
    combo = tuple(int(i) for i in combo)
    K = len(combo) if K is None else K
    if len(combo) != K:
        raise ValueError("combo size differs from K")
    if K > MAX_ENUMERABLE_K:
        raise ValueError(f"K={K} too large to enumerate (limit {MAX_ENUMERABLE_K})")
    logs = np.array([order_log_prob(q, perm) for perm in itertools.permutations(combo)])
    return float(np.exp(_logsumexp(logs)))


def estimate_combination_probability(q, ranking: SampledRanking, K: int | None = None,
                                     rng: np.random.Generator | None = None) -> float:
    """K! times the draw probability of the top K under one uniform reshuffle.

    Uses ``ranking.perm_draw`` unless ``rng`` is given, in which case a fresh
    permutation is drawn. Unbiased for :func:`exact_combination_probability`.
    """
    K = ranking.K if K is None else K
    perm = ranking.perm_draw if rng is None else rng.permutation(K)
    top = np.asarray(ranking.order[:K])[perm]
    return float(np.exp(math.lgamma(K + 1) + order_log_prob(q, top)))


def estimate_many(q, tops: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized estimator over rows of ``tops`` (n, K), one fresh shuffle each."""
    q = np.asarray(q, dtype=np.float64)
    n, K = tops.shape
    keys = rng.random((n, K))
    shuffled = np.take_along_axis(tops, np.argsort(keys, axis=1), axis=1)
    return np.exp(math.lgamma(K + 1) + _batch_order_log_prob(q, shuffled))


def _batch_order_log_prob(q: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
    n, L = prefixes.shape
    logits = np.tile(q, (n, 1))
    rows = np.arange(n)
    total = np.zeros(n)
    for j in range(L):
        pick = prefixes[:, j]
        total += logits[rows, pick] - _logsumexp(logits, axis=1)
        logits[rows, pick] = -np.inf
    return total


def select_topk_deterministic(q, K: int) -> np.ndarray:
    """Indices of the K largest scores in descending order; ties go to the lower index."""
    q = np.asarray(q, dtype=np.float64)
    if K > q.size:
        raise ValueError(f"K={K} exceeds M={q.size}")
    return np.argsort(-q, kind="stable")[:K]


# -- differentiable log-probabilities ------------------------------------------


def torch_order_log_prob(q: Tensor, prefixes: Tensor) -> Tensor:
    """log-probability of each row of ``prefixes`` (n, L) being drawn in order."""
    n, L = prefixes.shape
    neg_inf = torch.tensor(float("-inf"), dtype=q.dtype)
    alive = torch.ones(n, q.shape[0], dtype=torch.bool)
    total = torch.zeros(n, dtype=q.dtype)
    rows = torch.arange(n)
    logits = q.unsqueeze(0).expand(n, -1)
    for j in range(L):
        pick = prefixes[:, j]
        denom = torch.logsumexp(torch.where(alive, logits, neg_inf), dim=1)
        total = total + q[pick] - denom
        alive = alive.clone()
        alive[rows, pick] = False
    return total


def torch_combination_log_prob(q: Tensor, tops: Tensor, mode: str = "estimate",
                               perms: Tensor | None = None) -> Tensor:
    """log pi-hat of each top-K row in ``tops`` (n, K).

    ``estimate``: log(K!) + log P(order reshuffled by ``perms``), the
    permutation estimator. ``exact``: log of the full K!-order sum.
    ``ordered``: log P of the rows in the order given.
    """
    n, K = tops.shape
    if mode == "ordered":
        return torch_order_log_prob(q, tops)
    if mode == "estimate":
        if perms is None:
            raise ValueError("estimate mode needs the reshuffle permutations")
        return math.lgamma(K + 1) + torch_order_log_prob(q, torch.gather(tops, 1, perms))
    if mode == "exact":
        if K > MAX_ENUMERABLE_K:
            raise ValueError(f"K={K} too large to enumerate (limit {MAX_ENUMERABLE_K})")
        all_perms = torch.tensor(list(itertools.permutations(range(K))), dtype=torch.long)
        P = all_perms.shape[0]
        expanded = tops[:, all_perms].reshape(n * P, K)
        logs = torch_order_log_prob(q, expanded).reshape(n, P)
        return torch.logsumexp(logs, dim=1)
    raise ValueError(f"unknown log-probability mode {mode!r}; expected one of {LOGPROB_MODES}")


def reinforce_surrogate(q: Tensor, rankings: Sequence[SampledRanking], rewards: Sequence[float],
                        mode: str = "estimate", baseline=0.0) -> Tensor:
    """(1/N) sum_n (R_n - b_n) * log pi-hat(R_n); its gradient is the REINFORCE step.

    ``baseline`` is a scalar or one value per sample.
    """
    if not rankings:
        raise ValueError("need at least one sampled ranking")
    K = rankings[0].K
    tops = torch.as_tensor(np.stack([r.order[:K] for r in rankings]), dtype=torch.long)
    perms = torch.as_tensor(np.stack([r.perm_draw for r in rankings]), dtype=torch.long)
    logp = torch_combination_log_prob(q, tops, mode, perms)
    adv = torch.as_tensor(np.asarray(rewards, dtype=np.float64) - np.asarray(baseline, dtype=np.float64), dtype=q.dtype)
    return (adv * logp).mean()


def policy_gradient_step(q, samples: Sequence[tuple], K: int | None = None, mode: str = "estimate") -> np.ndarray:
    """Gradient w.r.t. ``q`` of the mean reward-weighted log-likelihood.

    ``samples`` holds (SampledRanking, reward) pairs.
    """
    rankings = [s for s, _ in samples]
    rewards = [r for _, r in samples]
    if K is not None and any(r.K != K for r in rankings):
        raise ValueError("sample K differs from K")
    qt = torch.tensor(np.asarray(q, dtype=np.float64), requires_grad=True)
    (grad,) = torch.autograd.grad(reinforce_surrogate(qt, rankings, rewards, mode), qt)
    return grad.numpy()
