import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfrr.matching import (
    Matching, PreferenceError, PreferenceProfile, bipartition, check_stability, gale_shapley, greedy_matching,
    match_pool, max_weight_matching, topk_retrieval,
)
from cfrr.objectives import ScoringModel
from oracles import all_stable_matchings, brute_force_max_weight, is_stable, random_profiles, random_weights


def model(n=30, seed=0):
    return ScoringModel.init(n, 4, seed=seed, scale=1.0)


class TestTopK:
    def test_full_sort(self):
        m = model()
        cand = np.arange(1, 30)
        top = topk_retrieval(m, 0, cand, 29)
        s = m.logits(np.zeros(29, int), cand)
        assert top.candidates.tolist() == cand[np.lexsort((cand, -s))].tolist()
        assert not top.truncated

    def test_ties_ascending_id(self):
        flat = lambda u, v: np.zeros(len(v))  # noqa: E731
        assert topk_retrieval(flat, 0, [9, 3, 7, 1], 3).candidates.tolist() == [1, 3, 7]

    def test_k_too_large_flagged(self):
        top = topk_retrieval(model(), 0, [1, 2, 3], 10)
        assert top.truncated and top.candidates.shape[0] == 3

    def test_user_in_candidates(self):
        with pytest.raises(ValueError):
            topk_retrieval(model(), 0, [0, 1], 1)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 40))
    def test_equals_sort_prefix(self, seed, k):
        rng = np.random.default_rng(seed)
        cand = rng.permutation(np.arange(1, 41))
        scores = np.round(rng.normal(size=41), 1)  # coarse values force ties
        scorer = lambda u, v: scores[v]  # noqa: E731
        top = topk_retrieval(scorer, 0, cand, k)
        ref = cand[np.lexsort((cand, -scores[cand]))][:k]
        assert top.candidates.tolist() == ref.tolist()


class TestPreferences:
    def test_self_entry(self):
        with pytest.raises(PreferenceError):
            PreferenceProfile({1: (2, 1)})

    def test_duplicates(self):
        with pytest.raises(PreferenceError):
            PreferenceProfile({1: (2, 2)})

    def test_from_scores_truncates(self):
        prof = PreferenceProfile.from_scores(model(), [0, 1], np.arange(10, 30), k=5)
        assert all(len(p) == 5 for p in prof.lists.values())


class TestGaleShapley:
    def test_one_by_one(self):
        m = gale_shapley(PreferenceProfile({0: (10,)}), PreferenceProfile({10: (0,)}))
        assert m.pairs == ((0, 10),) and m.unmatched == ()

    def test_classic_three_by_three(self):
        # every proposer ranks the receivers identically; receivers rank proposers in reverse
        props = PreferenceProfile({0: (10, 11, 12), 1: (10, 12, 11), 2: (11, 10, 12)})
        recvs = PreferenceProfile({10: (2, 1, 0), 11: (0, 2, 1), 12: (1, 0, 2)})
        m = gale_shapley(props, recvs)
        assert check_stability(m, props, recvs) == []
        stable = all_stable_matchings(props, recvs)
        perfect = [s for s in stable if len(s) == 3]
        assert tuple(sorted(m.pairs)) in [tuple(sorted(s)) for s in perfect]

    def test_truncated_lists(self):
        props = PreferenceProfile({0: (10,), 1: (10,)})
        recvs = PreferenceProfile({10: (0, 1), 11: (0, 1)})
        m = gale_shapley(props, recvs)
        assert m.pairs == ((0, 10),)
        assert 1 in m.unmatched and 11 in m.unmatched
        assert check_stability(m, props, recvs) == []

    def test_sides_must_be_disjoint(self):
        with pytest.raises(PreferenceError):
            gale_shapley(PreferenceProfile({0: (1,)}), PreferenceProfile({0: (), 1: (0,)}))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_random_instances_stable(self, seed):
        rng = np.random.default_rng(seed)
        props, recvs = random_profiles(rng, int(rng.integers(1, 50)), int(rng.integers(1, 50)))
        m = gale_shapley(props, recvs)
        assert check_stability(m, props, recvs) == []
        assert is_stable(m.pairs, props, recvs)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_proposer_optimal(self, seed):
        rng = np.random.default_rng(seed)
        props, recvs = random_profiles(rng, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        m = gale_shapley(props, recvs).partner()
        for other in all_stable_matchings(props, recvs):
            alt = dict(other)
            for p, prefs in props.lists.items():
                mine, theirs = m.get(p), alt.get(p)
                if theirs is None:
                    continue
                assert mine is not None and prefs.index(mine) <= prefs.index(theirs)


class TestStabilityCheck:
    def test_swapped_partners(self):
        props = PreferenceProfile({0: (10, 11), 1: (11, 10)})
        recvs = PreferenceProfile({10: (0, 1), 11: (1, 0)})
        swapped = Matching(((0, 11), (1, 10)))
        # both pairs block; the crossing instance has exactly the two diagonal pairs preferring each other
        blocking = check_stability(swapped, props, recvs)
        assert set(blocking) <= {(0, 10), (1, 11)} and blocking

    def test_one_blocking_pair(self):
        props = PreferenceProfile({0: (10, 11), 1: (10, 11)})
        recvs = PreferenceProfile({10: (0, 1), 11: (0, 1)})
        swapped = Matching(((0, 11), (1, 10)))
        assert check_stability(swapped, props, recvs) == [(0, 10)]

    def test_empty_matching(self):
        props = PreferenceProfile({0: (10,), 1: (11,)})
        recvs = PreferenceProfile({10: (0,), 11: (1,)})
        assert sorted(check_stability(Matching(()), props, recvs)) == [(0, 10), (1, 11)]


class TestMaxWeight:
    def test_single_pair(self):
        assert max_weight_matching({(0, 1): 0.5}).pairs == ((0, 1),)
        assert max_weight_matching({(0, 1): 0.0}).pairs == ()

    def test_two_by_two(self):
        w = {(0, 10): 2.0, (0, 11): 1.0, (1, 10): 1.0, (1, 11): 2.0}
        m = max_weight_matching(w)
        assert m.pairs == ((0, 10), (1, 11)) and m.total(w) == 4.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            max_weight_matching({(0, 1): -0.1})

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 10**6))
    def test_exact_equals_brute_force(self, seed):
        W, w = random_weights(np.random.default_rng(seed))
        exact = max_weight_matching(w)
        assert not exact.approximate
        assert exact.total(w) == pytest.approx(brute_force_max_weight(W), abs=1e-12)
        assert exact.total(w) >= greedy_matching(w).total(w) - 1e-12

    def test_greedy_fallback_flagged(self):
        rng = np.random.default_rng(0)
        w = {(i, 100 + j): float(rng.random()) for i in range(5) for j in range(5)}
        m = max_weight_matching(w, exact_threshold=4)
        assert m.approximate
        assert m.total(w) <= max_weight_matching(w).total(w) + 1e-12


class TestPool:
    def test_bipartition_deterministic(self):
        a1, b1 = bipartition(range(11), seed=3)
        a2, b2 = bipartition(range(11), seed=3)
        assert a1.tolist() == a2.tolist() and b1.tolist() == b2.tolist()
        assert sorted(a1.tolist() + b1.tolist()) == list(range(11))

    @pytest.mark.parametrize("method", ["stable", "max_weight"])
    def test_match_pool(self, method, tmp_path):
        m, scores = match_pool(model(40), range(40), method=method, k=10, seed=1)
        users = [x for p in m.pairs for x in p] + list(m.unmatched)
        assert sorted(users) == list(range(40))
        assert all(0 < s < 1 for s in scores.values())
        m.to_csv(tmp_path / "m.csv", scores)
        rows = list(csv.DictReader(open(tmp_path / "m.csv")))
        assert len(rows) == len(m.pairs) + len(m.unmatched)
        assert all(r["v"] == "" and r["score"] == "" for r in rows[len(m.pairs):])
        again, _ = match_pool(model(40), range(40), method=method, k=10, seed=1)
        assert again.pairs == m.pairs

    def test_disjointness_enforced(self):
        with pytest.raises(ValueError):
            Matching(((0, 1), (1, 2)))
