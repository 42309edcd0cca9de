"""Ranking accuracy, exposure fairness and cross-seed statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy import stats

from .core import DataError, ExposureLog, derive_rng


@dataclass(frozen=True)
class RankedList:
    """Candidates of one user in rank order with binary relevance."""

    user: int
    candidates: np.ndarray
    relevance: np.ndarray

    def __post_init__(self):
        if self.candidates.shape != self.relevance.shape:
            raise ValueError("candidates and relevance must align")
        if np.unique(self.candidates).shape[0] != self.candidates.shape[0]:
            raise ValueError("duplicate candidates in ranked list")
        if np.any(self.candidates == self.user):
            raise ValueError("a user cannot be its own candidate")

    def __len__(self) -> int:
        return int(self.candidates.shape[0])


@dataclass(frozen=True)
class CandidateSet:
    """Unranked evaluation candidates of one user."""

    user: int
    candidates: np.ndarray
    relevance: np.ndarray


def roc_auc(y: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    y = np.asarray(y) > 0.5
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = stats.rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _partners(log: ExposureLog, threshold: float) -> Dict[int, set]:
    out: Dict[int, set] = {}
    pos = log.exposed & (np.nan_to_num(log.outcome, nan=-1.0) >= threshold)
    for a, b in zip(log.u[pos].tolist(), log.v[pos].tolist()):
        out.setdefault(a, set()).add(b)
        if log.pair_space.symmetric:
            out.setdefault(b, set()).add(a)
    return out


def sample_candidates(
    test_log: ExposureLog,
    n_eval_users: int = 1500,
    candidates_per_user: int = 100,
    seed: int = 0,
    exclude: Sequence[ExposureLog] = (),
    threshold: float = 0.5,
    full_ranking: bool = False,
) -> List[CandidateSet]:
    """Held-out positives plus sampled non-positive candidates per user.

    Users with at least one held-out positive are eligible; up to
    ``n_eval_users`` of them are sampled.  Positives of the user in any of
    the ``exclude`` logs (train/validation) never appear as candidates.
    """
    held = _partners(test_log, threshold)
    if not held:
        raise DataError("no user has a held-out positive")
    n = test_log.pair_space.n_users
    rng = derive_rng(seed, 307)
    eligible = np.array(sorted(held))
    if eligible.shape[0] > n_eval_users:
        eligible = np.sort(rng.choice(eligible, size=n_eval_users, replace=False))
    known = [_partners(log, threshold) for log in exclude]
    out = []
    for user in eligible.tolist():
        pos = np.array(sorted(held[user]), dtype=np.int64)
        blocked = np.zeros(n, dtype=bool)
        blocked[user] = True
        blocked[pos] = True
        for k in known:
            if user in k:
                blocked[list(k[user])] = True
        free = np.flatnonzero(~blocked)
        if full_ranking or free.shape[0] <= candidates_per_user:
            neg = free
        else:
            neg = np.sort(rng.choice(free, size=candidates_per_user, replace=False))
        cand = np.concatenate([pos, neg])
        rel = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
        out.append(CandidateSet(user, cand, rel))
    return out


def rank_candidates(scorer, candidate_sets: Sequence[CandidateSet]) -> List[RankedList]:
    """Sort each candidate set by descending score, ties by ascending id.

    ``scorer(users, candidates)`` must return scores for the pairs
    elementwise (a :class:`ScoringModel` works directly).
    """
    if not candidate_sets:
        return []
    users = np.concatenate([np.full(c.candidates.shape[0], c.user) for c in candidate_sets])
    cands = np.concatenate([c.candidates for c in candidate_sets])
    logit = getattr(scorer, "logits", scorer)
    scores = np.asarray(logit(users, cands), dtype=np.float64)
    out = []
    start = 0
    for c in candidate_sets:
        k = c.candidates.shape[0]
        s = scores[start:start + k]
        order = np.lexsort((c.candidates, -s))
        out.append(RankedList(c.user, c.candidates[order], c.relevance[order]))
        start += k
    return out


def build_eval_lists(
    model,
    test_log: ExposureLog,
    n_eval_users: int = 1500,
    candidates_per_user: int = 100,
    seed: int = 0,
    exclude: Sequence[ExposureLog] = (),
    threshold: float = 0.5,
    full_ranking: bool = False,
) -> List[RankedList]:
    cands = sample_candidates(
        test_log, n_eval_users, candidates_per_user, seed, exclude, threshold, full_ranking
    )
    return rank_candidates(model, cands)


def ndcg_at_k(lst: RankedList, k: int = 10) -> float:
    rel = np.asarray(lst.relevance, dtype=np.float64)
    if rel.sum() == 0:
        return 0.0
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    top = rel[:k]
    dcg = float((top * disc[: top.shape[0]]).sum())
    ideal = np.sort(rel)[::-1][:k]
    idcg = float((ideal * disc[: ideal.shape[0]]).sum())
    return dcg / idcg


def reciprocal_rank(lst: RankedList) -> float:
    hits = np.flatnonzero(np.asarray(lst.relevance) > 0)
    return 0.0 if hits.shape[0] == 0 else 1.0 / (hits[0] + 1)


def mrr(lists: Sequence[RankedList]) -> float:
    if not lists:
        return 0.0
    return float(np.mean([reciprocal_rank(lst) for lst in lists]))


def exposure_counts(lists: Sequence[RankedList], k: int, total_users: int) -> np.ndarray:
    """How many top-k lists each user appears in, for every user in the population."""
    counts = np.zeros(total_users, dtype=np.int64)
    for lst in lists:
        np.add.at(counts, lst.candidates[:k], 1)
    return counts


def coverage_at_k(lists: Sequence[RankedList], k: int = 10, total_users: int = 1) -> float:
    if total_users < 1:
        raise ValueError("total_users must be >= 1")
    return float((exposure_counts(lists, k, total_users) > 0).sum() / total_users)


def gini_pairwise(x) -> float:
    """sum_i sum_j |x_i - x_j| / (2 n^2 mean(x)); 0 when the mean is 0."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    mean = x.mean() if n else 0.0
    if mean == 0:
        return 0.0
    total = 0.0
    for start in range(0, n, 1024):
        total += np.abs(x[start:start + 1024, None] - x[None, :]).sum()
    return float(total / (2.0 * n * n * mean))


def gini_sorted(x) -> float:
    """sum_i (2i - n - 1) x_(i) / (n^2 mean(x)) over ascending order statistics."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    mean = x.mean() if n else 0.0
    if mean == 0:
        return 0.0
    i = np.arange(1, n + 1)
    return float(((2 * i - n - 1) * x).sum() / (n * n * mean))


def gini_exposure(lists: Sequence[RankedList], k: int = 10, total_users: int = 1) -> float:
    if total_users < 1:
        raise ValueError("total_users must be >= 1")
    return gini_sorted(exposure_counts(lists, k, total_users))


def paired_t_statistic(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(d.mean() / (d.std(ddof=1) / np.sqrt(d.shape[0])))


def paired_t_test(a, b) -> float:
    """Two-sided p-value of the paired t statistic with n - 1 degrees of freedom.

    Zero variance of the differences gives p = 0 when the means differ and
    p = 1 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[0] < 2:
        raise ValueError("paired samples of equal length >= 2 required")
    d = a - b
    if np.all(d == d[0]):
        return 0.0 if d[0] != 0 else 1.0
    t = paired_t_statistic(a, b)
    return float(2.0 * stats.t.sf(abs(t), d.shape[0] - 1))


def bonferroni(p_values, alpha: float = 0.05) -> List[bool]:
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no p-values")
    return [bool(x < alpha / p.shape[0]) for x in p]


def cohens_d(a, b) -> float:
    """Mean difference over the pooled standard deviation sqrt((s_a^2 + s_b^2)/2)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[0] < 2:
        raise ValueError("paired samples of equal length >= 2 required")
    pooled = np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2.0)
    if pooled == 0:
        raise ValueError("zero pooled standard deviation")
    return float((a.mean() - b.mean()) / pooled)


@dataclass
class MetricsReport:
    ndcg_at_10: float
    mrr: float
    coverage_at_10: float
    gini_exposure: float
    n_eval_users: int
    seed: int = 0
    config: dict = field(default_factory=dict)
    per_user: Dict[str, list] = field(default_factory=dict)

    def row(self) -> Dict[str, float]:
        return {
            "ndcg_at_10": self.ndcg_at_10,
            "mrr": self.mrr,
            "coverage_at_10": self.coverage_at_10,
            "gini_exposure": self.gini_exposure,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_lists(lists: Sequence[RankedList], total_users: int, k: int = 10, seed: int = 0, config=None) -> MetricsReport:
    per_ndcg = [ndcg_at_k(lst, k) for lst in lists]
    return MetricsReport(
        ndcg_at_10=float(np.mean(per_ndcg)) if per_ndcg else 0.0,
        mrr=mrr(lists),
        coverage_at_10=coverage_at_k(lists, k, total_users),
        gini_exposure=gini_exposure(lists, k, total_users),
        n_eval_users=len(lists),
        seed=seed,
        config=dict(config or {}),
        per_user={
            "user": [int(lst.user) for lst in lists],
            "ndcg_at_10": per_ndcg,
            "reciprocal_rank": [reciprocal_rank(lst) for lst in lists],
        },
    )


def evaluate_model(
    model,
    test_log: ExposureLog,
    exclude: Sequence[ExposureLog] = (),
    n_eval_users: int = 1500,
    candidates_per_user: int = 100,
    seed: int = 0,
    k: int = 10,
    threshold: float = 0.5,
    full_ranking: bool = False,
) -> MetricsReport:
    lists = build_eval_lists(
        model, test_log, n_eval_users, candidates_per_user, seed, exclude, threshold, full_ranking
    )
    return evaluate_lists(
        lists, test_log.pair_space.n_users, k, seed,
        {"n_eval_users": n_eval_users, "candidates_per_user": candidates_per_user, "full_ranking": full_ranking},
    )
