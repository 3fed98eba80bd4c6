import csv
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from netope import env as E
from netope.classifier import ClassifierConfig
from netope.conformance import (
    TOY_NEIGHBORHOODS,
    TOY_PI0,
    TOY_PI1,
    TOY_PX,
    discrete_toy_odds,
    path_graph,
    toy_configurations,
)
from netope.errors import ParameterError, SupportError
from netope.estimators import (
    CSV_COLUMNS,
    ORACLE_W_MAX,
    EstimateResult,
    RewardModel,
    WeightVector,
    bipw_weights,
    classifier_weights,
    dm_estimate,
    dr_estimate,
    fit_reward_model,
    intipw_estimate,
    ipw_estimate,
    oracle_joint_weights,
    sgipw_shrink,
    snipw_estimate,
    vanilla_weights,
    write_results_csv,
)
from netope.graph import NetworkGraph, generate_erdos_renyi


def wv(values, provenance="true-propensity"):
    return WeightVector(np.asarray(values, dtype=float), provenance)


def _world(rng, n=6, p=6, D=2, c=1.0, gamma=0.8, beta=0.0, graph=None):
    env = E.make_env(rng, p_dim=p, d_actions=D, c=c, noise_sd=0.0)
    g = graph if graph is not None else path_graph(n)
    X = rng.standard_normal((g.n, p))
    pol = E.PolicyParams(beta, gamma)
    return env, g, X, pol


def _all_logs(p0):
    n, D = p0.shape
    for acts in itertools.product(range(D), repeat=n):
        acts = np.array(acts)
        yield acts, float(np.prod(p0[np.arange(n), acts]))


def _exact_model(env, X):
    """Linear model that interpolates the true no-interference reward at the n contexts."""
    D = env.d_actions
    target = np.cbrt(_direct_inner(env, X))
    coef = np.linalg.solve(X, target).T  # (D, p); X is square and invertible
    return RewardModel(coef, np.zeros(D), np.ones(D, dtype=bool), 0.0, 0.0)


def _direct_inner(env, X):
    """Own-action reward before the cube root, written out independently of the env module."""
    own = (X @ env.beta3)[:, None] + X @ env.action_embeddings.T
    return ((X @ env.beta1) * 1.5 ** (X @ env.beta2))[:, None] + env.b * own ** 2


class TestWeightVector:
    @pytest.mark.parametrize("values", [[1.0, -0.1], [np.nan, 1.0], [np.inf], [[1.0]]])
    def test_rejects_invalid(self, values):
        with pytest.raises(ParameterError):
            wv(values)

    def test_unknown_provenance(self):
        with pytest.raises(ParameterError):
            wv([1.0], "magic")

    def test_read_only(self):
        w = wv([1.0, 2.0])
        with pytest.raises(ValueError):
            w.w[0] = 3.0


class TestRewardModel:
    def test_linear_target_recovered(self, rng):
        n, p = 200, 4
        X = rng.standard_normal((n, p))
        a = rng.integers(0, 2, n)
        theta = rng.standard_normal((2, p))
        r = np.einsum("ij,ij->i", X, theta[a]) + np.array([0.5, -1.0])[a]
        ds = E.LoggedDataset(NetworkGraph.from_edges(n, []), X, a, r)
        m = fit_reward_model(ds, reg=0.0)
        assert np.max(np.abs(m.predict(X)[np.arange(n), a] - r)) < 1e-8
        m_small = fit_reward_model(ds, reg=1e-10)
        assert np.max(np.abs(m_small.predict(X)[np.arange(n), a] - r)) < 1e-8

    def test_constant_rewards(self, rng):
        X = rng.standard_normal((30, 3))
        ds = E.LoggedDataset(NetworkGraph.from_edges(30, []), X, rng.integers(0, 3, 30), np.full(30, 2.5))
        assert np.allclose(fit_reward_model(ds, reg=1.0, n_actions=3).predict(rng.standard_normal((5, 3))), 2.5)

    def test_unseen_action_falls_back(self, rng):
        X = rng.standard_normal((20, 3))
        r = rng.standard_normal(20)
        ds = E.LoggedDataset(NetworkGraph.from_edges(20, []), X, np.zeros(20, dtype=int), r)
        m = fit_reward_model(ds, n_actions=3)
        assert np.all(m.predict(X)[:, 1:] == r.mean())
        assert not m.fitted[1] and not m.fitted[2]


class TestDirectMethod:
    def test_constant_model(self, rng):
        X = rng.standard_normal((5, 2))
        ds = E.LoggedDataset(NetworkGraph.from_edges(5, []), X, np.zeros(5, dtype=int), np.zeros(5))
        m = RewardModel(np.zeros((3, 2)), np.full(3, 1.75), np.ones(3, bool), 0.0, 0.0)
        probs = rng.dirichlet(np.ones(3), size=5)
        assert dm_estimate(ds, m, probs).value == pytest.approx(1.75, abs=1e-15)

    def test_deterministic_policy(self, rng):
        X = rng.standard_normal((5, 2))
        ds = E.LoggedDataset(NetworkGraph.from_edges(5, []), X, np.zeros(5, dtype=int), np.zeros(5))
        m = RewardModel(rng.standard_normal((2, 2)), rng.standard_normal(2), np.ones(2, bool), 0.0, 0.0)
        best = rng.integers(0, 2, 5)
        probs = np.eye(2)[best]
        assert dm_estimate(ds, m, probs).value == pytest.approx(m.predict(X)[np.arange(5), best].mean(), abs=1e-15)

    def test_exact_model_matches_value_without_interference(self, rng):
        env, g, X, pol = _world(rng, c=0.0)
        truth = E.true_policy_value(env, pol, g, X, E.EXHAUSTIVE)
        model = _exact_model(env, X)
        pe = E.evaluation_propensity_matrix(env, pol, X)
        a = rng.integers(0, 2, 6)
        ds = E.LoggedDataset(g, X, a, E.rewards_for_actions(env, g, X, a))
        assert dm_estimate(ds, model, pe).value == pytest.approx(truth, abs=1e-8)

    def test_shape_mismatch(self, rng):
        X = rng.standard_normal((4, 2))
        ds = E.LoggedDataset(NetworkGraph.from_edges(4, []), X, np.zeros(4, dtype=int), np.zeros(4))
        m = RewardModel(np.zeros((2, 2)), np.zeros(2), np.ones(2, bool), 0.0, 0.0)
        with pytest.raises(ParameterError):
            dm_estimate(ds, m, np.full((4, 3), 1 / 3))


class TestVanillaWeights:
    def test_identical_policies(self, rng):
        p = rng.dirichlet(np.ones(3), size=7)
        assert np.array_equal(vanilla_weights(p, p, rng.integers(0, 3, 7)).w, np.ones(7))

    def test_direct_ratio(self):
        w = vanilla_weights(np.array([[0.8, 0.2]]), np.array([[0.5, 0.5]]), np.array([1]))
        assert w.w[0] == pytest.approx(2.5, rel=1e-15)

    def test_mean_weight_two_units(self):
        p0 = np.array([[0.3, 0.7], [0.55, 0.45]])
        pe = np.array([[0.9, 0.1], [0.2, 0.8]])
        mean = sum(prob * vanilla_weights(p0, pe, a).w for a, prob in _all_logs(p0))
        assert np.allclose(mean, 1.0, atol=1e-12, rtol=0)

    def test_support_error_names_unit(self):
        p0 = np.array([[0.5, 0.5], [1.0, 0.0]])
        with pytest.raises(SupportError, match="unit 1"):
            vanilla_weights(p0, np.full((2, 2), 0.5), np.array([0, 1]))

    def test_shape_checked(self):
        with pytest.raises(ParameterError):
            vanilla_weights(np.full((3, 2), 0.5), np.full((2, 2), 0.5), np.array([0, 1, 0]))


class TestIPWFamily:
    def test_ipw_values(self):
        assert ipw_estimate(wv([1, 1, 1]), np.array([1.0, 2.0, 3.0])).value == 2.0
        assert ipw_estimate(wv([2, 0.5]), np.array([1.0, 1.0])).value == 1.25

    def test_snipw_values(self):
        assert snipw_estimate(wv([3, 3, 3]), np.array([1.0, 2.0, 3.0])).value == pytest.approx(2.0, abs=1e-15)
        assert snipw_estimate(wv([2, 0.5]), np.array([1.0, 0.0])).value == pytest.approx(0.8, abs=1e-15)

    @given(st.lists(st.floats(0.01, 100), min_size=1, max_size=30), st.integers(-20, 20), st.integers(0, 2**31))
    def test_snipw_scale_invariance(self, ws, k, seed):
        r = np.random.default_rng(seed).standard_normal(len(ws))
        w = np.array(ws)
        base = snipw_estimate(wv(w), r).value
        # powers of two scale without rounding, so the result is bit-identical
        assert snipw_estimate(wv(w * 2.0 ** k), r).value == base
        c = 1.0 + (seed % 997) / 10.0
        assert snipw_estimate(wv(w * c), r).value == pytest.approx(base, rel=1e-12, abs=1e-12)

    def test_snipw_all_zero_weights(self):
        res = snipw_estimate(wv([0.0, 0.0]), np.array([1.0, 2.0]))
        assert res.value == 0.0 and np.isnan(res.ess)

    def test_intipw_equals_snipw(self, rng):
        w = wv(rng.uniform(0.1, 5, 20), "classifier-graph")
        r = rng.standard_normal(20)
        assert intipw_estimate(w, r).value == snipw_estimate(w, r).value
        assert intipw_estimate(w, r).estimator == "intipw"

    def test_intipw_at_chance(self, rng):
        r = rng.standard_normal(9)
        assert intipw_estimate(wv(np.ones(9), "classifier-graph"), r).value == pytest.approx(r.mean(), abs=1e-15)

    def test_ipw_unbiased_without_interference(self, rng):
        env, g, X, pol = _world(rng, c=0.0, beta=-0.5)
        p0 = E.behavior_propensity_matrix(env, pol, X)
        pe = E.evaluation_propensity_matrix(env, pol, X)
        kernel = E.RewardKernel(env, g, X)
        expectation = sum(prob * ipw_estimate(vanilla_weights(p0, pe, a), kernel.noise_free(a)).value
                          for a, prob in _all_logs(p0))
        assert expectation == pytest.approx(E.true_policy_value(env, pol, g, X, E.EXHAUSTIVE), abs=1e-10)

    def test_diagnostics(self):
        res = ipw_estimate(WeightVector(np.array([1.0, 3.0]), "oracle-joint", clips=2), np.array([1.0, 1.0]))
        assert res.ess == pytest.approx(16 / 10)
        assert (res.max_weight, res.mean_weight, res.clips, res.provenance) == (3.0, 2.0, 2, "oracle-joint")

    @given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=40))
    def test_ess_range(self, ws):
        ess = ipw_estimate(wv(ws), np.zeros(len(ws))).ess
        assert 1 - 1e-9 <= ess <= len(ws) + 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            ipw_estimate(wv([1.0]), np.zeros(2))

    def test_purity(self, rng):
        w, r = wv(rng.uniform(0, 3, 50)), rng.standard_normal(50)
        assert ipw_estimate(w, r) == ipw_estimate(w, r)
        assert snipw_estimate(w, r) == snipw_estimate(w, r)


class TestDoublyRobust:
    def _setup(self, rng):
        env, g, X, pol = _world(rng)
        p0 = E.behavior_propensity_matrix(env, pol, X)
        pe = E.evaluation_propensity_matrix(env, pol, X)
        a = E.sample_actions(p0, rng)
        ds = E.LoggedDataset(g, X, a, E.rewards_for_actions(env, g, X, a) + rng.standard_normal(6))
        return env, g, X, pol, p0, pe, ds

    def test_zero_model_is_ipw(self, rng):
        *_, p0, pe, ds = self._setup(rng)
        w = vanilla_weights(p0, pe, ds.actions)
        zero = RewardModel(np.zeros((2, 6)), np.zeros(2), np.ones(2, bool), 0.0, 0.0)
        assert dr_estimate(ds, zero, w, pe).value == ipw_estimate(w, ds.rewards).value

    def test_zero_weights_is_dm(self, rng):
        *_, p0, pe, ds = self._setup(rng)
        m = fit_reward_model(ds)
        assert dr_estimate(ds, m, wv(np.zeros(6), "constant"), pe).value == dm_estimate(ds, m, pe).value

    def test_exact_model_any_weights(self, rng):
        env, g, X, pol = _world(rng, c=0.0)
        pe = E.evaluation_propensity_matrix(env, pol, X)
        truth = E.true_policy_value(env, pol, g, X, E.EXHAUSTIVE)
        model = _exact_model(env, X)
        for _ in range(5):
            a = rng.integers(0, 2, 6)
            ds = E.LoggedDataset(g, X, a, E.rewards_for_actions(env, g, X, a))
            w = wv(rng.uniform(0, 10, 6))
            assert dr_estimate(ds, model, w, pe).value == pytest.approx(truth, abs=1e-10)


class TestSGIPW:
    def test_identity_at_zero(self):
        w = wv([0.5, 4.0])
        assert np.array_equal(sgipw_shrink(w, 0.0).w, w.w)

    def test_formula(self):
        assert sgipw_shrink(wv([4.0]), 0.5).w[0] == pytest.approx(1.6, rel=1e-15)

    def test_full_shrinkage(self):
        assert np.array_equal(sgipw_shrink(wv([0.3, 4.0, 100.0]), 1.0).w, np.ones(3))

    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=20), st.floats(1e-3, 1))
    def test_bounded_by_inverse_lambda(self, ws, lam):
        out = sgipw_shrink(wv(ws), lam).w
        w = np.array(ws)
        assert np.all(out <= 1 / lam * (1 + 1e-12))
        # shrinkage moves each weight toward 1 without crossing it
        assert np.all(out >= np.minimum(w, 1.0) * (1 - 1e-12))
        assert np.all(out <= np.maximum(w, 1.0) * (1 + 1e-12))

    @pytest.mark.parametrize("lam", [-0.1, 1.1])
    def test_invalid_lambda(self, lam):
        with pytest.raises(ParameterError):
            sgipw_shrink(wv([1.0]), lam)


class TestOracleWeights:
    def test_identical_policies(self, rng):
        g = generate_erdos_renyi(12, 0.3, rng)
        p = rng.dirichlet(np.ones(2), size=12)
        assert np.allclose(oracle_joint_weights(g, p, p, rng.integers(0, 2, 12)).w, 1.0, rtol=1e-14)

    def test_isolated_unit_is_vanilla(self, rng):
        g = NetworkGraph.from_edges(4, [(0, 1), (1, 2)])
        p0, pe = rng.dirichlet(np.ones(2), size=4), rng.dirichlet(np.ones(2), size=4)
        a = rng.integers(0, 2, 4)
        assert oracle_joint_weights(g, p0, pe, a).w[3] == pytest.approx(vanilla_weights(p0, pe, a).w[3], rel=1e-14)

    def test_matches_explicit_product(self, rng):
        g = generate_erdos_renyi(15, 0.25, rng)
        p0, pe = rng.dirichlet(np.ones(3), size=15), rng.dirichlet(np.ones(3), size=15)
        a = rng.integers(0, 3, 15)
        v = pe[np.arange(15), a] / p0[np.arange(15), a]
        expected = [v[i] * np.prod(v[g.neighbors(i)]) for i in range(15)]
        assert np.allclose(oracle_joint_weights(g, p0, pe, a).w, expected, rtol=1e-12)

    def test_zero_in_neighborhood(self):
        g = NetworkGraph.from_edges(3, [(0, 1)])
        p0 = np.full((3, 2), 0.5)
        pe = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
        w = oracle_joint_weights(g, p0, pe, np.array([1, 0, 0])).w
        assert w.tolist() == [0.0, 0.0, 1.0]

    def test_clipping_counted(self):
        g = NetworkGraph.from_edges(3, [(0, 1), (1, 2)])
        p0 = np.array([[0.01, 0.99]] * 3)
        pe = np.array([[0.99, 0.01]] * 3)
        res = oracle_joint_weights(g, p0, pe, np.zeros(3, dtype=int))
        # end units multiply two ratios of 99, the middle unit three
        assert res.clips == 1
        assert res.w.tolist() == pytest.approx([99.0 ** 2, ORACLE_W_MAX, 99.0 ** 2], rel=1e-12)

    def test_unbiased_on_cycle(self, rng):
        g = NetworkGraph.from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)])
        env, g, X, pol = _world(rng, p=3, graph=g)
        p0 = E.behavior_propensity_matrix(env, pol, X)
        pe = E.evaluation_propensity_matrix(env, pol, X)
        kernel = E.RewardKernel(env, g, X)
        logs = list(_all_logs(p0))
        assert len(logs) == 16
        expectation = sum(prob * ipw_estimate(oracle_joint_weights(g, p0, pe, a), kernel.noise_free(a)).value
                          for a, prob in logs)
        assert expectation == pytest.approx(E.true_policy_value(env, pol, g, X, E.EXHAUSTIVE), abs=1e-10)


class TestClassifierWeights:
    def test_identical_actions_give_unit_weights(self, rng):
        X = rng.standard_normal((40, 3))
        a = rng.integers(0, 2, 40)
        w = bipw_weights(X, a, a, 2, ClassifierConfig(max_epochs=50))
        assert w.provenance == "classifier-flat"
        assert np.allclose(w.w, 1.0, atol=1e-6)

    def test_flat_odds_match_closed_form(self):
        """Additive log-odds on discrete features: the logistic MLE equals the empirical cell odds."""
        cells = {(0, 0): (150, 100), (0, 1): (50, 100), (1, 0): (50, 20), (1, 1): (150, 180)}
        # per context value, the logged and evaluation copies of the same units
        X, a0, a1 = [], [], []
        for x in (0, 1):
            logged = [a for a in (0, 1) for _ in range(cells[(x, a)][0])]
            evals = [a for a in (0, 1) for _ in range(cells[(x, a)][1])]
            X += [x] * len(logged)
            a0 += logged
            a1 += evals
        X, a0, a1 = np.array(X, float)[:, None], np.array(a0), np.array(a1)
        cfg = ClassifierConfig(embed_dim=1, n_gcn_layers=1, learning_rate=0.02, max_epochs=4000)
        w = bipw_weights(X, a0, a1, 2, cfg).w
        for (x, a), (n0, n1) in cells.items():
            mask = (X[:, 0] == x) & (a0 == a)
            assert np.allclose(w[mask], n1 / n0, atol=1e-3), (x, a)

    def test_flat_ignores_graph(self, rng):
        X = rng.standard_normal((20, 2))
        a0, a1 = rng.integers(0, 2, 20), rng.integers(0, 2, 20)
        cfg = ClassifierConfig(max_epochs=20)
        w_flat = bipw_weights(X, a0, a1, 2, cfg).w
        w_again, _ = classifier_weights(X, a0, a1, 2, cfg, graph=None)
        assert np.array_equal(w_flat, w_again.w)

    def test_bayes_odds_reproduce_self_normalized_oracle(self, rng):
        """IntIPW with the Bayes-optimal classifier odds equals self-normalized oracle IPW."""
        odds, _ = discrete_toy_odds()
        table = {cfg: w for cfg, w in zip(toy_configurations(), odds)}
        g = NetworkGraph.from_edges(3, [(0, 1), (1, 2)])
        for _ in range(20):
            x = rng.choice(2, size=3, p=TOY_PX)
            a = np.array([rng.choice(2, p=TOY_PI0[xi]) for xi in x])
            r = rng.standard_normal(3)
            w_bayes = [
                table[(i, tuple(x[j] for j in members) + tuple(a[j] for j in members))]
                for i, members in enumerate(TOY_NEIGHBORHOODS)
            ]
            oracle = oracle_joint_weights(g, TOY_PI0[x], TOY_PI1[x], a)
            got = intipw_estimate(wv(w_bayes, "classifier-graph"), r).value
            assert got == pytest.approx(snipw_estimate(oracle, r).value, abs=1e-6)


class TestResultsCSV:
    def test_columns_and_round_trip(self, tmp_path):
        rows = [(0, EstimateResult("ipw", 1.5, 3.0, 2.0, 1.0, 0, "true-propensity")),
                (1, EstimateResult("dm", -0.25))]
        p = tmp_path / "r.csv"
        write_results_csv(rows, p)
        with open(p) as fh:
            data = list(csv.reader(fh))
        assert tuple(data[0]) == CSV_COLUMNS == ("estimator", "seed", "value", "ess", "max_weight", "mean_weight", "clips")
        assert data[1][:3] == ["ipw", "0", "1.5"] and float(data[2][2]) == -0.25
        assert data[2][3] == "nan"
