"""Reward R = U + lambda * F and the evaluation metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .records import RankingInstance

# 2**e - 1 is evaluated with e capped here; beyond it the gains lose all meaning.
NDCG_EXPONENT_CAP = 64.0


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 0.0
    group_count: int = 6

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be a finite nonnegative number, got {self.lam}")


@dataclass(frozen=True)
class RewardBreakdown:
    U: float
    F: float
    R: float


def _check_enrollments(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("negative enrollment")
    return e


def entropy(p) -> float:
    """Natural-log entropy with 0 * log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0


def utility(e_ordered, K: int) -> float:
    """(enrollment in the top K - enrollment below it) / total; 0 when nobody enrolls."""
    e = _check_enrollments(e_ordered)
    total = e.sum()
    if total == 0:
        return 0.0
    return float((e[:K].sum() - e[K:].sum()) / total)


def cohort_distribution(e, races) -> np.ndarray | None:
    """Enrollment-weighted mean of the race rows, or None when enrollment is zero."""
    e = _check_enrollments(e)
    races = np.asarray(races, dtype=np.float64)
    if races.ndim != 2 or races.shape[0] != e.shape[0]:
        raise ValueError("race rows must align with enrollments")
    sums = races.sum(axis=1)
    if np.any(races < 0) or np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("race rows must be probability distributions")
    total = e.sum()
    if total == 0:
        return None
    return (e[:, None] * races).sum(axis=0) / total


def fairness_entropy(e_ordered, race_ordered, K: int) -> float:
    """Entropy of the racial make-up of the population enrolled by the top K."""
    e = _check_enrollments(e_ordered)
    races = np.asarray(race_ordered, dtype=np.float64)
    dist = cohort_distribution(e[:K], races[:K])
    return 0.0 if dist is None else entropy(dist)


def reward(e_ordered, race_ordered, K: int, config: RewardConfig) -> RewardBreakdown:
    u = utility(e_ordered, K)
    f = fairness_entropy(e_ordered, race_ordered, K)
    return RewardBreakdown(u, f, u + config.lam * f)


def ranking_reward(inst: RankingInstance, order: Sequence[int], config: RewardConfig) -> RewardBreakdown:
    order = np.asarray(order)
    return reward(inst.enrollments[order], inst.races[order], inst.K, config)


def relative_error(selected: Sequence[int], inst: RankingInstance) -> float:
    e = inst.enrollments
    best = np.sort(e)[::-1][: inst.K].sum()
    if best == 0:
        return 0.0
    return float((best - e[np.asarray(selected)].sum()) / best)


def _dcg(values: np.ndarray) -> float:
    if np.any(values > NDCG_EXPONENT_CAP):
        warnings.warn(f"nDCG gains capped at exponent {NDCG_EXPONENT_CAP:g}", RuntimeWarning, stacklevel=3)
        values = np.minimum(values, NDCG_EXPONENT_CAP)
    gains = np.power(2.0, values) - 1.0
    discounts = np.log2(np.arange(2, values.size + 2))
    return float((gains / discounts).sum())


def ndcg(model_order_enrollments, K: int, all_enrollments=None) -> float:
    """nDCG@K with gains 2**e - 1.

    The ideal list is the descending sort of ``all_enrollments`` (default:
    the model's own list, which is then the full candidate set).
    """
    m = _check_enrollments(model_order_enrollments)
    pool = m if all_enrollments is None else _check_enrollments(all_enrollments)
    ideal = _dcg(np.sort(pool)[::-1][:K])
    if ideal == 0:
        return 1.0
    return _dcg(m[:K]) / ideal


def population_entropy(selected: Sequence[int], inst: RankingInstance) -> float:
    selected = np.asarray(selected)
    dist = cohort_distribution(inst.enrollments[selected], inst.races[selected])
    return 0.0 if dist is None else entropy(dist)


def population_distribution(selected: Sequence[int], inst: RankingInstance) -> np.ndarray | None:
    selected = np.asarray(selected)
    return cohort_distribution(inst.enrollments[selected], inst.races[selected])
