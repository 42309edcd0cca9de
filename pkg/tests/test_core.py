import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfrr.core import (
    DataError, ExposureLog, PairSpace, SplitSpec, derive_rng, seeded_rng, split_log,
)
from conftest import make_log


def ten_log():
    u = np.arange(10)
    return ExposureLog.from_exposed(u, u + 10, np.ones(10), PairSpace.square(20))


class TestPairSpace:
    def test_size(self):
        assert PairSpace.square(5).size == 10
        assert PairSpace(3, 4, symmetric=False).size == 12

    @given(st.integers(2, 40))
    def test_enumeration_count_and_canonical(self, n):
        space = PairSpace.square(n)
        u, v = space.enumerate()
        assert u.shape[0] == n * (n - 1) // 2
        assert np.all(u < v)
        assert np.unique(space.key(u, v)).shape[0] == u.shape[0]

    @given(st.integers(0, 49), st.integers(0, 49))
    def test_key_symmetric(self, a, b):
        space = PairSpace.square(50)
        assert space.key(a, b) == space.key(b, a)
        cu, cv = space.unkey(space.key(a, b))
        assert (cu, cv) == (min(a, b), max(a, b))

    def test_asymmetric_keeps_orientation(self):
        space = PairSpace(4, 4, symmetric=False)
        assert space.key(1, 2) != space.key(2, 1)

    def test_uniform_sample_is_valid(self):
        space = PairSpace.square(7)
        u, v = space.sample_uniform(5000, seeded_rng(0))
        assert np.all(u < v) and v.max() < 7
        # every pair reachable, roughly uniform
        counts = np.bincount(space.key(u, v), minlength=49)
        hit = counts[counts > 0]
        assert hit.shape[0] == 21
        assert hit.min() > 5000 / 21 * 0.7

    def test_validate(self):
        space = PairSpace.square(3)
        with pytest.raises(DataError):
            space.validate([0], [3])
        with pytest.raises(DataError):
            space.validate([1], [1])


class TestExposureLog:
    def test_outcome_iff_exposed(self):
        space = PairSpace.square(3)
        with pytest.raises(DataError):
            ExposureLog([0], [1], [True], [np.nan], [0], space)
        with pytest.raises(DataError):
            ExposureLog([0], [1], [False], [1.0], [0], space)
        log = ExposureLog([0, 1], [1, 2], [True, False], [0.3, np.nan], [0, 1], space)
        assert log[1].outcome is None and log[0].outcome == 0.3

    def test_duplicate_same_timestamp_rejected(self):
        space = PairSpace.square(3)
        with pytest.raises(DataError):
            ExposureLog.from_exposed([0, 1], [1, 0], [1, 1], space, timestamp=[5, 5])
        ExposureLog.from_exposed([0, 1], [1, 0], [1, 1], space, timestamp=[5, 6])

    def test_bounds_and_self_pairs(self):
        with pytest.raises(DataError):
            make_log([[0, 0]], n_users=3)
        with pytest.raises(DataError):
            make_log([[0, 5]], n_users=3)

    def test_canonical_storage_and_immutability(self):
        log = make_log([[2, 0]], n_users=3)
        assert (log.u[0], log.v[0]) == (0, 2)
        with pytest.raises(ValueError):
            log.u[0] = 1

    def test_csv_round_trip(self, tmp_path):
        space = PairSpace.square(4)
        log = ExposureLog([0, 1, 2], [1, 3, 3], [True, False, True], [0.25, np.nan, 1.0], [0, 1, 2], space)
        path = tmp_path / "log.csv"
        log.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "u,v,exposed,outcome,timestamp"
        assert lines[2] == "1,3,0,,1"
        assert ExposureLog.from_csv(path, space) == log

    def test_csv_malformed_line(self, tmp_path):
        path = tmp_path / "log.csv"
        path.write_text("u,v,exposed,outcome,timestamp\n0,1,1,1.0,0\n0,x,1,1.0,1\n")
        with pytest.raises(DataError, match=":3:"):
            ExposureLog.from_csv(path, PairSpace.square(3))


class TestSplit:
    def test_random_sizes(self):
        for seed in range(5):
            parts = split_log(ten_log(), SplitSpec("random", (0.7, 0.1, 0.2), seed))
            assert [len(p) for p in parts] == [7, 1, 2]

    def test_temporal_cut(self):
        tr, va, te = split_log(ten_log(), SplitSpec("temporal"))
        assert list(tr.timestamp) == list(range(7))
        assert list(va.timestamp) == [7]
        assert list(te.timestamp) == [8, 9]

    def test_deterministic(self):
        a = split_log(ten_log(), SplitSpec(seed=3))
        b = split_log(ten_log(), SplitSpec(seed=3))
        assert all(x == y for x, y in zip(a, b))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(10, 300), st.integers(0, 10_000), st.sampled_from(["random", "temporal"]))
    def test_disjoint_cover(self, n, seed, mode):
        rng = seeded_rng(seed)
        u, v = PairSpace.square(60).sample_uniform(n, rng)
        space = PairSpace.square(60)
        log = ExposureLog.from_exposed(u, v, rng.random(n), space, timestamp=rng.permutation(n))
        parts = split_log(log, SplitSpec(mode, seed=seed))
        ts = np.concatenate([p.timestamp for p in parts])
        assert np.array_equal(np.sort(ts), np.arange(n))
        assert all(p.pair_space == space for p in parts)

    def test_only_exposed_records_are_split(self):
        space = PairSpace.square(30)
        exposed = np.arange(20) % 2 == 0
        out = np.where(exposed, 1.0, np.nan)
        log = ExposureLog(np.zeros(20, int), np.arange(1, 21), exposed, out, np.arange(20), space)
        parts = split_log(log, SplitSpec())
        assert sum(len(p) for p in parts) == 10
        assert all(p.exposed.all() for p in parts)

    def test_errors(self):
        with pytest.raises(DataError):
            split_log(make_log(np.zeros((0, 2))[:0].astype(int), n_users=2), SplitSpec())
        with pytest.raises(DataError):
            split_log(make_log([[0, 1], [1, 2]]), SplitSpec())
        with pytest.raises(ValueError):
            SplitSpec(fractions=(0.5, 0.5, 0.5))


class TestRng:
    def test_same_seed_same_stream(self):
        assert seeded_rng(42).random() == seeded_rng(42).random()

    def test_different_seeds(self):
        assert not np.array_equal(seeded_rng(1).random(5), seeded_rng(2).random(5))

    @given(st.integers(0, 2**32 - 1))
    def test_uniform_range(self, seed):
        x = seeded_rng(seed).random(100)
        assert np.all((x >= 0) & (x < 1))

    def test_derived_streams_independent_of_siblings(self):
        a = derive_rng(7, 1, 0).random(3)
        assert np.array_equal(a, derive_rng(7, 1, 0).random(3))
        assert not np.array_equal(a, derive_rng(7, 1, 1).random(3))
