import dataclasses
import json

import numpy as np
import pytest

from cfrr.core import PairSpace
from cfrr.synthgen import (
    SynthConfig, dump_world, generate_world, load_world, logging_propensity, simulate_log,
    theta_table, true_match_prob,
)

SMALL = SynthConfig(n_users=200, latent_dim=8, target_log_size=2000, seed=3)


@pytest.fixture(scope="module")
def world():
    return generate_world(SMALL)


def test_config_validation():
    for bad in [dict(n_users=1), dict(latent_dim=0), dict(target_log_size=0), dict(bias_strength=-1),
                dict(n_users=4, target_log_size=6)]:
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def test_default_scale_shape():
    w = generate_world(SynthConfig(n_users=5000, latent_dim=16))
    assert w.factors.shape == (5000, 16)


def test_deterministic(world):
    again = generate_world(SMALL)
    assert np.array_equal(world.factors, again.factors)
    assert np.array_equal(world.popularity, again.popularity)
    assert world.logging_offset == again.logging_offset
    assert simulate_log(world).log == simulate_log(again).log


def test_zero_spread_shrinks_popularity_spread():
    flat = generate_world(dataclasses.replace(SMALL, popularity_spread=0.0))
    skew = generate_world(dataclasses.replace(SMALL, popularity_spread=0.5))
    cv = lambda p: p.std() / p.mean()  # noqa: E731
    assert cv(flat.popularity) < 0.5 * cv(skew.popularity)


def test_popularity_is_total_match_probability(world):
    n = world.n_users
    for u in [0, 17, n - 1]:
        others = np.delete(np.arange(n), u)
        assert np.isclose(world.popularity[u], true_match_prob(world, np.full(n - 1, u), others).sum())


def test_match_rate_calibrated(world):
    u, v = world.pair_space.enumerate()
    assert abs(true_match_prob(world, u, v).mean() - SMALL.target_match_rate) < 1e-6


class TestTrueMatchProb:
    def _world(self, factors):
        n = factors.shape[0]
        return generate_world(SynthConfig(n_users=n, latent_dim=factors.shape[1], target_log_size=1)).__class__(
            factors=factors, popularity=np.zeros(n), pair_space=PairSpace.square(n), match_offset=0.0,
            logging_offset=0.0, attributes=factors, config=SynthConfig(n_users=n, target_log_size=1),
        )

    def test_zero_factors(self):
        assert true_match_prob(self._world(np.zeros((3, 4))), 0, 1) == 0.5

    def test_closed_form(self):
        f = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
        assert true_match_prob(self._world(f), 0, 1) == pytest.approx(0.8807970779778823, abs=1e-15)

    def test_symmetric_and_range(self, world):
        u, v = world.pair_space.enumerate()
        a, b = true_match_prob(world, u, v), true_match_prob(world, v, u)
        assert np.array_equal(a, b)
        assert np.all((a > 0) & (a < 1))

    def test_self_pair(self, world):
        with pytest.raises(ValueError):
            true_match_prob(world, 2, 2)


class TestLoggingPropensity:
    def test_uniform_when_unbiased(self):
        w = generate_world(dataclasses.replace(SMALL, bias_strength=0.0))
        _, _, th = theta_table(w)
        assert np.ptp(th) == 0.0
        assert simulate_log(w).metadata["uniform_logging"]

    def test_monotone_in_popularity(self, world):
        z = world.standardized_popularity
        u, v = world.pair_space.enumerate()
        th = logging_propensity(world, u, v)
        order = np.argsort(z[u] + z[v], kind="stable")
        s = (z[u] + z[v])[order]
        t = th[order]
        strictly = s[1:] > s[:-1]
        assert np.all(t[1:][strictly] > t[:-1][strictly])

    def test_calibrated_to_log_size(self, world):
        _, _, th = theta_table(world)
        assert abs(th.sum() - SMALL.target_log_size) / SMALL.target_log_size < 0.01

    def test_symmetric_and_positive(self, world):
        u, v = world.pair_space.enumerate()
        a = logging_propensity(world, u, v)
        assert np.array_equal(a, logging_propensity(world, v, u))
        assert np.all((a > 0) & (a < 1))
        with pytest.raises(ValueError):
            logging_propensity(world, 1, 1)

    def test_decile_ratio_grows_with_bias(self):
        ratios = []
        for bias in [0.0, 0.5, 1.0, 2.0]:
            cfg = dataclasses.replace(SMALL, bias_strength=bias)
            w = generate_world(cfg)
            u, v = w.pair_space.enumerate()
            th = logging_propensity(w, u, v)
            per_user = np.bincount(u, th, w.n_users) + np.bincount(v, th, w.n_users)
            order = np.argsort(w.popularity)
            k = w.n_users // 10
            ratios.append(per_user[order[-k:]].mean() / per_user[order[:k]].mean())
        assert ratios[0] == pytest.approx(1.0, abs=1e-9)
        assert all(b > a for a, b in zip(ratios, ratios[1:]))


class TestSimulate:
    def test_certain_exposure(self):
        w = generate_world(SynthConfig(n_users=3, latent_dim=2, target_log_size=1, bias_strength=0.0))
        w = dataclasses.replace(w, logging_offset=50.0)
        log = simulate_log(w).log
        assert len(log) == 3
        assert list(zip(log.u, log.v)) == [(0, 1), (0, 2), (1, 2)]
        assert list(log.timestamp) == [0, 1, 2]

    def test_binomial_count(self):
        # first 1000 enumerated pairs with theta = 0.5: count in [440, 560]
        w = generate_world(SynthConfig(n_users=46, latent_dim=2, target_log_size=10, bias_strength=0.0))
        w = dataclasses.replace(w, logging_offset=0.0)
        u, v = w.pair_space.enumerate()
        first = set(w.pair_space.key(u[:1000], v[:1000]).tolist())
        inside = 0
        for seed in range(200):
            log = simulate_log(w, seed=seed).log
            c = sum(k in first for k in log.keys().tolist())
            inside += 440 <= c <= 560
        assert inside / 200 >= 0.99

    def test_exposure_frequency_matches_theta(self):
        w = generate_world(SynthConfig(n_users=6, latent_dim=2, target_log_size=5, bias_strength=1.0))
        u, v, th = theta_table(w)
        counts = np.zeros(w.pair_space.n_users ** 2)
        for seed in range(10_000):
            np.add.at(counts, simulate_log(w, seed=seed).log.keys(), 1)
        freq = counts[w.pair_space.key(u, v)] / 10_000
        assert np.max(np.abs(freq - th)) <= 0.02

    def test_theta_aligned_and_outcomes_binary(self, world):
        sim = simulate_log(world)
        assert np.allclose(sim.theta, logging_propensity(world, sim.log.u, sim.log.v), rtol=0, atol=1e-15)
        assert set(np.unique(sim.log.outcome)) <= {0.0, 1.0}
        assert abs(len(sim.log) - SMALL.target_log_size) < 5 * np.sqrt(SMALL.target_log_size)

    def test_sampled_world_flagged(self):
        cfg = SynthConfig(n_users=20_001, latent_dim=4, target_log_size=20_000)
        w = generate_world(cfg)
        assert w.metadata["sampled_pairs"]
        sim = simulate_log(w)
        assert sim.metadata["sampled_pairs"]
        assert abs(len(sim.log) - 20_000) < 0.05 * 20_000


def test_dump_and_load(tmp_path, world):
    sim = simulate_log(world)
    paths = dump_world(world, tmp_path, sim)
    side = json.loads(paths["world"].read_text())
    assert side["config"]["n_users"] == SMALL.n_users and side["theta_table"] == "full"
    assert paths["theta"].read_text().splitlines()[0] == "u,v,theta"
    back = load_world(tmp_path)
    assert np.array_equal(back.factors, world.factors)
    assert np.array_equal(back.popularity, world.popularity)
    assert simulate_log(back).log == sim.log
    table = np.loadtxt(paths["theta"], delimiter=",", skiprows=1)
    assert table.shape[0] == world.pair_space.size
    assert np.array_equal(table[:, 2], theta_table(world)[2])
