"""Allocation over learned scores: top-k retrieval, stable matching, max-weight matching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import PathLike, derive_rng

EXACT_THRESHOLD = 512
DEFAULT_TRUNCATION = 50


class PreferenceError(ValueError):
    """Malformed preference lists (self entries or duplicates)."""


@dataclass(frozen=True)
class TopK:
    candidates: np.ndarray
    scores: np.ndarray
    truncated: bool = False  # True when k exceeded the candidate count


def _order(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices sorting by descending score, ascending id on ties."""
    return np.lexsort((ids, -scores))


def topk_retrieval(model, user: int, candidates, k: int) -> TopK:
    """The ``k`` highest-scoring candidates for ``user``.

    ``argpartition`` narrows to the top block before the exact sort, so the
    cost is linear in the candidate count plus ``k log k``.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    if np.any(cand == user):
        raise ValueError("candidates must exclude the user")
    if k < 0:
        raise ValueError("k must be non-negative")
    logit = getattr(model, "logits", model)
    scores = np.asarray(logit(np.full(cand.shape[0], user), cand), dtype=np.float64)
    flagged = k > cand.shape[0]
    k = min(k, cand.shape[0])
    if k == 0:
        return TopK(cand[:0], scores[:0], flagged)
    if k < cand.shape[0]:
        kth = np.partition(scores, cand.shape[0] - k)[cand.shape[0] - k]
        # keep every candidate tied with the k-th score so the id tie-break is exact
        block = np.flatnonzero(scores >= kth)
    else:
        block = np.arange(cand.shape[0])
    order = block[_order(scores[block], cand[block])][:k]
    return TopK(cand[order], scores[order], flagged)


@dataclass(frozen=True)
class PreferenceProfile:
    """Ordered acceptable partners per user, most preferred first."""

    lists: Mapping[int, Tuple[int, ...]]

    def __post_init__(self):
        clean = {}
        for user, prefs in self.lists.items():
            prefs = tuple(int(p) for p in prefs)
            if int(user) in prefs:
                raise PreferenceError(f"user {user} lists itself")
            if len(set(prefs)) != len(prefs):
                raise PreferenceError(f"user {user} has duplicate entries")
            clean[int(user)] = prefs
        object.__setattr__(self, "lists", clean)

    @property
    def users(self) -> List[int]:
        return sorted(self.lists)

    def rank(self) -> Dict[int, Dict[int, int]]:
        return {u: {p: i for i, p in enumerate(prefs)} for u, prefs in self.lists.items()}

    @classmethod
    def from_scores(cls, scorer, users: Sequence[int], partners: Sequence[int], k: Optional[int] = DEFAULT_TRUNCATION):
        """Rank ``partners`` for each of ``users`` by score (top-``k`` truncation)."""
        partners = np.asarray(partners, dtype=np.int64)
        out = {}
        for u in users:
            cand = partners[partners != u]
            top = topk_retrieval(scorer, int(u), cand, cand.shape[0] if k is None else k)
            out[int(u)] = tuple(top.candidates.tolist())
        return cls(out)


@dataclass(frozen=True)
class Matching:
    pairs: Tuple[Tuple[int, int], ...]
    unmatched: Tuple[int, ...] = ()
    approximate: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for a, b in self.pairs:
            if a in seen or b in seen or a == b:
                raise ValueError("each user may appear in at most one pair")
            seen.update((a, b))

    def partner(self) -> Dict[int, int]:
        out = {}
        for a, b in self.pairs:
            out[a] = b
            out[b] = a
        return out

    def total(self, weights: Mapping[Tuple[int, int], float]) -> float:
        return float(sum(weights.get(p, 0.0) for p in self.pairs))

    def to_csv(self, path: PathLike, scores: Optional[Mapping[Tuple[int, int], float]] = None) -> None:
        """Rows ``u,v,score``; unmatched users get an empty partner and score."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "v", "score"])
            for a, b in self.pairs:
                s = "" if scores is None else repr(float(scores.get((a, b), np.nan)))
                w.writerow([a, b, s])
            for a in self.unmatched:
                w.writerow([a, "", ""])


def _check_sides(proposers: PreferenceProfile, receivers: PreferenceProfile) -> None:
    overlap = set(proposers.lists) & set(receivers.lists)
    if overlap:
        raise PreferenceError(f"users {sorted(overlap)[:5]} appear on both sides")
    for u, prefs in proposers.lists.items():
        bad = [p for p in prefs if p not in receivers.lists]
        if bad:
            raise PreferenceError(f"proposer {u} lists non-receivers {bad[:5]}")
    for u, prefs in receivers.lists.items():
        bad = [p for p in prefs if p not in proposers.lists]
        if bad:
            raise PreferenceError(f"receiver {u} lists non-proposers {bad[:5]}")


def gale_shapley(proposers: PreferenceProfile, receivers: PreferenceProfile) -> Matching:
    """Proposer-optimal stable matching by deferred acceptance.

    A pair is acceptable only if each side lists the other; proposers whose
    lists run out stay unmatched.
    """
    _check_sides(proposers, receivers)
    rrank = receivers.rank()
    nxt = {u: 0 for u in proposers.lists}
    held: Dict[int, int] = {}
    free = sorted(proposers.lists, reverse=True)
    while free:
        p = free.pop()
        prefs = proposers.lists[p]
        while nxt[p] < len(prefs):
            r = prefs[nxt[p]]
            nxt[p] += 1
            if p not in rrank[r]:
                continue
            cur = held.get(r)
            if cur is None:
                held[r] = p
                break
            if rrank[r][p] < rrank[r][cur]:
                held[r] = p
                free.append(cur)
                break
    pairs = tuple(sorted((p, r) for r, p in held.items()))
    matched = {x for pr in pairs for x in pr}
    unmatched = tuple(sorted(u for u in list(proposers.lists) + list(receivers.lists) if u not in matched))
    return Matching(pairs, unmatched)


def check_stability(matching: Matching, proposers: PreferenceProfile, receivers: PreferenceProfile) -> List[Tuple[int, int]]:
    """Mutually acceptable unmatched pairs where both prefer each other to their assignment."""
    prank, rrank = proposers.rank(), receivers.rank()
    partner = matching.partner()
    blocking = []
    for p in sorted(prank):
        mine = partner.get(p)
        for r in proposers.lists[p]:
            if r == mine:
                break  # everyone further down is worse than the current partner
            if p not in rrank.get(r, {}):
                continue
            theirs = partner.get(r)
            if theirs is None or rrank[r][p] < rrank[r].get(theirs, len(rrank[r])):
                blocking.append((p, r))
    return blocking


def _as_dict(scores) -> Dict[Tuple[int, int], float]:
    if isinstance(scores, Mapping):
        return {(int(a), int(b)): float(w) for (a, b), w in scores.items()}
    raise TypeError("scores must map (u, v) pairs to weights")


def greedy_matching(scores: Mapping[Tuple[int, int], float]) -> Matching:
    """Take pairs by descending weight (ties by pair id) while both ends are free."""
    weights = _as_dict(scores)
    items = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))
    used, pairs = set(), []
    for (a, b), w in items:
        if w <= 0 or a in used or b in used:
            continue
        used.update((a, b))
        pairs.append((a, b))
    users = {x for pr in weights for x in pr}
    return Matching(tuple(sorted(pairs)), tuple(sorted(users - used)), approximate=True)


def max_weight_matching(scores: Mapping[Tuple[int, int], float], exact_threshold: int = EXACT_THRESHOLD) -> Matching:
    """Maximum-weight bipartite matching of left ids (first) to right ids (second).

    Up to ``exact_threshold`` users per side the optimum comes from the
    shortest-augmenting-path assignment solver; larger instances fall back
    to greedy matching, flagged as approximate.  Zero-weight pairs are never
    matched.
    """
    weights = _as_dict(scores)
    if any(w < 0 or not np.isfinite(w) for w in weights.values()):
        raise ValueError("weights must be finite and non-negative")
    left = sorted({a for a, _ in weights})
    right = sorted({b for _, b in weights})
    if set(left) & set(right):
        raise ValueError("left and right ids must be disjoint")
    if max(len(left), len(right), 0) > exact_threshold:
        return greedy_matching(weights)
    if not weights:
        return Matching((), ())
    li = {a: i for i, a in enumerate(left)}
    ri = {b: j for j, b in enumerate(right)}
    W = np.zeros((len(left), len(right)))
    for (a, b), w in weights.items():
        W[li[a], ri[b]] = w
    rows, cols = linear_sum_assignment(W, maximize=True)
    pairs = tuple(sorted((left[i], right[j]) for i, j in zip(rows, cols) if W[i, j] > 0))
    matched = {x for pr in pairs for x in pr}
    unmatched = tuple(sorted(u for u in left + right if u not in matched))
    return Matching(pairs, unmatched)


def bipartition(users: Iterable[int], seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Split a one-sided pool into two random halves (proposers, receivers)."""
    users = np.asarray(sorted(int(u) for u in users), dtype=np.int64)
    perm = derive_rng(seed, 701).permutation(users.shape[0])
    half = users.shape[0] // 2
    return np.sort(users[perm[:half]]), np.sort(users[perm[half:]])


def match_pool(scorer, users: Sequence[int], method: str = "stable", k: int = DEFAULT_TRUNCATION, seed: int = 0,
               exact_threshold: int = EXACT_THRESHOLD) -> Tuple[Matching, Dict[Tuple[int, int], float]]:
    """Bipartition ``users`` and allocate with stable or max-weight matching.

    Returns the matching and the score of every matched pair (match
    probability, so weights are non-negative).
    """
    left, right = bipartition(users, seed)
    logit = getattr(scorer, "logits", scorer)
    if method == "stable":
        props = PreferenceProfile.from_scores(scorer, left, right, k)
        recs = PreferenceProfile.from_scores(scorer, right, left, k)
        m = gale_shapley(props, recs)
    elif method == "max_weight":
        uu = np.repeat(left, right.shape[0])
        vv = np.tile(right, left.shape[0])
        s = 1.0 / (1.0 + np.exp(-np.asarray(logit(uu, vv), dtype=np.float64)))
        m = max_weight_matching({(int(a), int(b)): float(w) for a, b, w in zip(uu, vv, s)}, exact_threshold)
    else:
        raise ValueError(f"unknown matching method {method!r}")
    if m.pairs:
        a = np.array([p[0] for p in m.pairs])
        b = np.array([p[1] for p in m.pairs])
        s = 1.0 / (1.0 + np.exp(-np.asarray(logit(a, b), dtype=np.float64)))
        scores = {p: float(x) for p, x in zip(m.pairs, s)}
    else:
        scores = {}
    return m, scores
