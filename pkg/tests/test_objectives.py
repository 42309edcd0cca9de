import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfrr.core import DataError, SplitSpec, split_log
from cfrr.objectives import (
    Batch, ObjectiveSpec, OutcomeConfig, OutcomeModel, ScoringModel, UserFeatureTable, evaluate_objective,
    fit_outcome_model, ips_objective, naive_objective, pointwise_loss, regularizer, score, snips_dr_objective,
    snips_objective, snips_risk,
)
from cfrr.synthgen import SynthConfig, generate_world, simulate_log
from cfrr.trainer import default_user_features
from gradcheck import check_objectives, check_outcome_network, random_config, rel_error, numeric_grad


def zero_model(n=4, d=2):
    return ScoringModel(np.zeros((n, d)), np.zeros((n, d)), np.zeros(n), np.zeros(1))


def random_model(n=6, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return ScoringModel(rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=n), rng.normal(size=1))


class TestScore:
    def test_zero_params(self):
        assert score(zero_model(), 0, 1) == 0.5

    def test_hand_set_example(self):
        m = zero_model(2, 2)
        m.P[0] = [1.0, 0.0]
        m.Q[1] = [1.0, 0.0]
        assert score(m, 0, 1) == pytest.approx(0.7310585786300049, abs=1e-15)

    @given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 100))
    def test_symmetric(self, u, v, seed):
        if u == v:
            return
        m = random_model(seed=seed)
        assert score(m, u, v) == score(m, v, u)

    def test_self_pair(self):
        with pytest.raises(ValueError):
            score(zero_model(), 2, 2)

    def test_json_round_trip(self, tmp_path):
        m = random_model()
        m.save(tmp_path / "m.json")
        back = ScoringModel.load(tmp_path / "m.json")
        assert np.array_equal(back.logits([0, 1], [2, 3]), m.logits([0, 1], [2, 3]))


class TestPointwiseLoss:
    def test_values(self):
        assert pointwise_loss(1, 0.5) == pytest.approx(0.6931471805599453, abs=1e-15)
        assert pointwise_loss(0, 0.9) == pytest.approx(2.3025850929940455, abs=1e-12)

    def test_clamped(self):
        assert np.isfinite(pointwise_loss(1, 0.0)) and np.isfinite(pointwise_loss(0, 1.0))
        assert pointwise_loss(1, 0.0) == pytest.approx(-np.log(1e-7))

    @given(st.floats(0.01, 0.99))
    def test_soft_label_minimizer(self, r):
        grid = np.linspace(0.001, 0.999, 999)
        best = grid[np.argmin(pointwise_loss(r, grid))]
        assert abs(best - r) <= 0.001 + 1e-12


@pytest.fixture
def setup():
    model, batch, w, outcome, unif, lam = random_config(7)
    return model, batch, w, outcome, unif


class TestIdentities:
    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_unit_weights_coincide(self, seed):
        model, batch, *_ = random_config(seed)
        ones = np.ones(len(batch))
        a = naive_objective(model, batch, 0.01)[0]
        b = ips_objective(model, batch, ones, None, 0.01)[0]
        c = ips_objective(model, batch, ones, len(batch), 0.01)[0]
        d = snips_objective(model, batch, ones, 0.01)[0]
        assert a == pytest.approx(b, rel=1e-14) and a == pytest.approx(c, rel=1e-14)
        assert a == pytest.approx(d, rel=1e-14)

    def test_single_example_is_loss_plus_reg(self, setup):
        model, batch, *_ = setup
        one = batch.take([0])
        lam = 0.01
        expected = pointwise_loss(one.r[0], model(one.u[0], one.v[0])) + lam * regularizer(model, [one.u[0], one.v[0]])
        assert naive_objective(model, one, lam)[0] == pytest.approx(expected, rel=1e-13)

    def test_duplicated_batch_mean_invariant(self, setup):
        model, batch, *_ = setup
        twice = Batch(np.tile(batch.u, 2), np.tile(batch.v, 2), np.tile(batch.r, 2))
        assert naive_objective(model, twice, 0.0)[0] == pytest.approx(naive_objective(model, batch, 0.0)[0], rel=1e-14)

    @given(st.floats(1e-3, 1e3), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_snips_homogeneous_ips_linear(self, k, seed):
        model, batch, w, *_ = random_config(seed)
        assert snips_objective(model, batch, k * w, 0.0)[0] == pytest.approx(
            snips_objective(model, batch, w, 0.0)[0], rel=1e-12)
        assert ips_objective(model, batch, k * w, None, 0.0)[0] == pytest.approx(
            k * ips_objective(model, batch, w, None, 0.0)[0], rel=1e-12)

    def test_equal_weights_snips_is_batch_mean(self, setup):
        model, batch, *_ = setup
        w = np.full(len(batch), 3.7)
        assert snips_objective(model, batch, w, 0.01)[0] == pytest.approx(naive_objective(model, batch, 0.01)[0], rel=1e-14)

    @given(st.integers(0, 10_000), st.floats(1e-4, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_regularization_decomposes_exactly(self, seed, lam):
        model, batch, w, outcome, unif, _ = random_config(seed)
        users = np.concatenate([batch.u, batch.v])
        pen = regularizer(model, users)
        pairs = [
            (naive_objective(model, batch, lam)[0], naive_objective(model, batch, 0.0)[0], pen),
            (ips_objective(model, batch, w, None, lam)[0], ips_objective(model, batch, w, None, 0.0)[0], pen),
            (snips_objective(model, batch, w, lam)[0], snips_objective(model, batch, w, 0.0)[0], pen),
        ]
        dr_users = np.concatenate([users, unif[0], unif[1]])
        pairs.append((snips_dr_objective(model, batch, w, outcome, unif, lam)[0],
                      snips_dr_objective(model, batch, w, outcome, unif, 0.0)[0], regularizer(model, dr_users)))
        for with_reg, without, p in pairs:
            assert with_reg == pytest.approx(without + lam * p, rel=1e-13, abs=1e-13)

    def test_snips_risk_is_data_term(self, setup):
        model, batch, w, *_ = setup
        assert snips_risk(model, batch, w) == pytest.approx(snips_objective(model, batch, w, 0.0)[0], rel=1e-14)


class TestDoublyRobust:
    def test_perfect_pseudo_labels_cancel(self, setup):
        model, batch, w, *_ = setup
        uniq = {}
        for i, key in enumerate(zip(batch.u.tolist(), batch.v.tolist())):
            uniq.setdefault(key, i)
        keep = np.array(sorted(uniq.values()))
        b1 = batch.take(keep)
        w1 = w[keep]
        table = {(a, b): r for a, b, r in zip(b1.u.tolist(), b1.v.tolist(), b1.r.tolist())}

        def oracle(u, v):
            return np.array([table[(a, b)] for a, b in zip(np.atleast_1d(u).tolist(), np.atleast_1d(v).tolist())])

        # terms 1 and 2 cancel, leaving the uniform-sample mean
        value, grad = snips_dr_objective(model, b1, w1, oracle, (b1.u, b1.v), 0.0)
        nv, ngrad = naive_objective(model, b1, 0.0)
        assert value == pytest.approx(nv, rel=1e-12)
        assert rel_error(grad.dense(model.n_users)["P"], ngrad.dense(model.n_users)["P"]) < 1e-12
        # with equal weights that mean is the SNIPS value
        eq = np.full(len(b1), 2.0)
        assert snips_dr_objective(model, b1, eq, oracle, (b1.u, b1.v), 0.0)[0] == pytest.approx(
            snips_objective(model, b1, eq, 0.0)[0], rel=1e-12)

    def test_empty_uniform_sample(self, setup):
        model, batch, w, outcome, _ = setup
        with pytest.raises(DataError):
            snips_dr_objective(model, batch, w, outcome, (np.array([], int), np.array([], int)))


class TestErrors:
    def test_empty_batch(self):
        empty = Batch(np.array([], int), np.array([], int), np.array([]))
        with pytest.raises(DataError):
            naive_objective(zero_model(), empty)
        with pytest.raises(DataError):
            snips_objective(zero_model(), empty, np.array([]))

    def test_weight_mismatch(self, setup):
        model, batch, *_ = setup
        with pytest.raises(DataError):
            ips_objective(model, batch, np.ones(len(batch) + 1))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ObjectiveSpec(kind="dr")
        with pytest.raises(ValueError):
            ObjectiveSpec(clip_c=0)

    def test_dispatch(self, setup):
        model, batch, w, outcome, unif = setup
        for kind, ref in [("naive", naive_objective(model, batch, 0.0)[0]),
                          ("snips", snips_objective(model, batch, w, 0.0)[0]),
                          ("snips_dr", snips_dr_objective(model, batch, w, outcome, unif, 0.0)[0])]:
            got = evaluate_objective(ObjectiveSpec(kind=kind, reg_lambda=0.0), model, batch, w, outcome, unif)[0]
            assert got == ref
        pop = evaluate_objective(ObjectiveSpec("ips", reg_lambda=0.0, ips_normalizer="population"),
                                 model, batch, w, pair_space_size=99)[0]
        assert pop == pytest.approx(ips_objective(model, batch, w, 99, 0.0)[0], rel=1e-14)


class TestGradients:
    @pytest.mark.parametrize("seed", range(0, 100, 7))
    def test_objectives_match_finite_differences(self, seed):
        errs = check_objectives(seed)
        assert max(errs.values()) < 1e-4, errs

    @pytest.mark.parametrize("seed", range(0, 100, 9))
    def test_outcome_network_matches_finite_differences(self, seed):
        assert check_outcome_network(seed) < 1e-4

    def test_full_width_network(self):
        rng = np.random.default_rng(0)
        net = OutcomeModel.init(6, (64, 32), seed=1)
        X = rng.normal(size=(5, 6))
        y = np.array([0.0, 1.0, 1.0, 0.0, 0.4])
        _, grads = net.loss_and_grad(X, y)
        # check the first-layer weights only; the rest of the chain is covered above
        W0 = net.weights[0]

        def loss_at(x):
            net.weights[0] = x.reshape(W0.shape)
            out = net.loss_and_grad(X, y)[0]
            net.weights[0] = W0
            return out

        assert rel_error(grads[0].ravel(), numeric_grad(loss_at, W0.ravel().copy())) < 1e-4

    def test_gradient_touches_only_batch_users(self, setup):
        model, batch, w, *_ = setup
        _, grad = snips_objective(model, batch, w, 0.1)
        assert set(grad.users.tolist()) == set(np.concatenate([batch.u, batch.v]).tolist())


class TestOutcomeModel:
    def test_constant_labels_without_stopping(self):
        rng = np.random.default_rng(0)
        feats = UserFeatureTable(rng.normal(size=(30, 3)))
        u = rng.integers(0, 15, 200)
        v = rng.integers(15, 30, 200)
        m = fit_outcome_model(Batch(u, v, np.ones(200)), feats,
                              OutcomeConfig(epochs=200, patience=0, learning_rate=0.01, batch_size=64))
        assert m(u, v).min() > 0.95

    def test_single_class_rejected(self):
        feats = UserFeatureTable(np.eye(4))
        with pytest.raises(DataError):
            fit_outcome_model(Batch(np.array([0, 1]), np.array([2, 3]), np.ones(2)), feats)

    def test_output_in_open_interval_and_symmetric(self):
        feats = UserFeatureTable(np.random.default_rng(1).normal(size=(10, 2)))
        net = OutcomeModel.init(feats.n_pair_features, seed=0, features=feats)
        p = net(np.arange(5), np.arange(5, 10))
        assert np.all((p > 0) & (p < 1))
        assert np.array_equal(p, net(np.arange(5, 10), np.arange(5)))

    def test_synthetic_validation_auc(self):
        world = generate_world(SynthConfig(n_users=400, latent_dim=8, target_log_size=8000, seed=3))
        log = simulate_log(world).log
        tr, va, _ = split_log(log, SplitSpec("random", (0.7, 0.1, 0.2), seed=3))
        feats = default_user_features(tr, world.attributes)
        m = fit_outcome_model(Batch.from_log(tr), feats, valid=Batch.from_log(va))
        assert m.metadata["valid_auc"] > 0.85

    def test_json_round_trip(self):
        feats = UserFeatureTable(np.random.default_rng(1).normal(size=(10, 2)))
        net = OutcomeModel.init(feats.n_pair_features, seed=0, features=feats)
        back = OutcomeModel.from_dict(net.to_dict())
        assert np.array_equal(back(np.arange(5), np.arange(5, 10)), net(np.arange(5), np.arange(5, 10)))
