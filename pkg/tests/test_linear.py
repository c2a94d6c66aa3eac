import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tabular_cql.errors import ShapeError, SingularSystemError
from tabular_cql.evaluation import CqlEvalConfig, cql_eq2_iterate, d_cql
from tabular_cql.linear import (LinearQModel, alpha_threshold_linear,
                                alpha_threshold_linear_detail, data_density,
                                expected_value_under_data, cql_linear_iterate, lstdq_iterate,
                                ntk_gradient_step, ntk_penalty_term, projection_matrix,
                                projection_penalty, projection_penalty_weighted,
                                random_features)
from tabular_cql.mdp import Policy, bellman_policy_op, discounted_state_marginal

from conftest import make_instance


def _instance(seed, n_features=None, constant=False):
    mdp, pi, beta, rng = make_instance(seed, min_prob=0.05)
    n = mdp.n_states * mdp.n_actions
    k = n_features or int(rng.integers(1, n + 1))
    fa = LinearQModel.zeros(random_features(n, k, rng, constant_column=constant))
    return mdp, pi, beta, fa, rng


def _positive_density(mdp, beta):
    return bool(np.all(data_density(mdp, beta) > 1e-12))


class TestModel:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            LinearQModel(np.ones((4, 2)), np.ones(3))

    def test_round_trip(self):
        fa = LinearQModel(np.arange(6.0).reshape(3, 2), [1.0, -1.0])
        back = LinearQModel.from_dict(fa.to_dict())
        np.testing.assert_array_equal(back.features, fa.features)
        np.testing.assert_array_equal(back.q_vector(), [-1.0, -1.0, -1.0])

    def test_wrong_row_count(self, chain, uniform2):
        fa = LinearQModel.zeros(np.eye(3))
        with pytest.raises(ShapeError):
            lstdq_iterate(fa, chain, uniform2, uniform2, np.zeros((2, 2)))

    def test_singular_features(self, chain, uniform2):
        f = np.ones((4, 2))
        with pytest.raises(SingularSystemError):
            lstdq_iterate(LinearQModel.zeros(f), chain, uniform2, uniform2, np.zeros((2, 2)))

    def test_zero_density_is_singular(self, chain):
        beta = Policy(np.array([[1.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(SingularSystemError):
            lstdq_iterate(LinearQModel.zeros(np.eye(4)), chain, beta, beta, np.zeros((2, 2)))

    def test_random_features_constant_column(self):
        f = random_features(6, 3, np.random.default_rng(0), constant_column=True)
        np.testing.assert_array_equal(f[:, 0], 1.0)
        assert np.linalg.matrix_rank(f) == 3


class TestTabularFeatures:
    """With F = I the projection is the identity and everything reduces to the tabular case."""

    def test_chain_penalty_equals_d_cql(self, chain, uniform2, target82):
        fa = LinearQModel.zeros(np.eye(4))
        np.testing.assert_allclose(projection_penalty(fa, chain, uniform2, target82), 0.36)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_equivalences(self, seed):
        mdp, pi, beta, rng = make_instance(seed, min_prob=0.05)
        assume(_positive_density(mdp, beta))
        fa = LinearQModel.zeros(np.eye(mdp.n_states * mdp.n_actions))
        np.testing.assert_allclose(projection_penalty(fa, mdp, beta, pi), d_cql(pi, beta),
                                   rtol=1e-7, atol=1e-9)
        q = rng.normal(size=mdp.shape)
        alpha = float(rng.uniform(0, 5))
        lin = cql_linear_iterate(fa, mdp, beta, pi, alpha, q).q(*mdp.shape)
        tab = cql_eq2_iterate(CqlEvalConfig(alpha, pi), mdp, pi, q, beta)
        np.testing.assert_allclose(lin, tab, rtol=1e-7, atol=1e-8)
        assert alpha_threshold_linear(fa, mdp, beta, pi, q) == pytest.approx(0.0, abs=1e-9)


class TestLstdq:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_matches_weighted_least_squares(self, seed):
        mdp, pi, beta, fa, rng = _instance(seed)
        assume(_positive_density(mdp, beta))
        q = rng.normal(size=mdp.shape)
        dens = data_density(mdp, beta)
        y = bellman_policy_op(mdp, pi, q).ravel()
        root = np.sqrt(dens)
        try:
            w = lstdq_iterate(fa, mdp, beta, pi, q).weights
        except SingularSystemError:
            assume(False)
        oracle = np.linalg.lstsq(root[:, None] * fa.features, root * y, rcond=None)[0]
        np.testing.assert_allclose(fa.features @ w, fa.features @ oracle, rtol=1e-6, atol=1e-7)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_no_penalty_cases(self, seed):
        mdp, pi, beta, fa, rng = _instance(seed)
        assume(_positive_density(mdp, beta))
        q = rng.normal(size=mdp.shape)
        try:
            plain = lstdq_iterate(fa, mdp, beta, pi, q).weights
        except SingularSystemError:
            assume(False)
        zero = cql_linear_iterate(fa, mdp, beta, pi, 0.0, q).weights
        on_data = cql_linear_iterate(fa, mdp, beta, pi, 3.0, q, mu=beta).weights
        np.testing.assert_allclose(zero, plain, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(on_data, plain, rtol=1e-12, atol=1e-12)

    def test_projection_is_idempotent(self):
        rng = np.random.default_rng(5)
        f = random_features(8, 3, rng)
        dens = rng.dirichlet(np.ones(8))
        p = projection_matrix(f, dens)
        np.testing.assert_allclose(p @ p, p, atol=1e-10)
        np.testing.assert_allclose(p @ f, f, atol=1e-10)


class TestProjectionPenalty:
    def test_per_state_sign_is_not_guaranteed(self):
        # one random draw where the projected penalty is negative at some state
        negative = 0
        for seed in range(50):
            mdp, pi, beta, fa, _ = _instance(seed, constant=True)
            if mdp.n_states * mdp.n_actions < 2 or not _positive_density(mdp, beta):
                continue
            try:
                negative += int(np.any(projection_penalty(fa, mdp, beta, pi) < -1e-9))
            except SingularSystemError:
                continue
        assert negative > 0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_weighted_aggregate_nonnegative_with_constant_feature(self, seed):
        mdp, pi, beta, fa, _ = _instance(seed, constant=True)
        assume(_positive_density(mdp, beta))
        try:
            value = projection_penalty_weighted(fa, mdp, beta, pi)
        except SingularSystemError:
            assume(False)
        assert value >= -1e-9

    def test_weighted_equals_d_cql_average_for_tabular(self, chain, uniform2, target82):
        fa = LinearQModel.zeros(np.eye(4))
        d = discounted_state_marginal(chain, uniform2)
        assert projection_penalty_weighted(fa, chain, uniform2, target82) == pytest.approx(
            float(d @ d_cql(target82, uniform2)))


class TestThreshold:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=80, deadline=None)
    def test_threshold_is_tight(self, seed):
        mdp, pi, beta, fa, rng = _instance(seed)
        assume(_positive_density(mdp, beta))
        q = rng.normal(size=mdp.shape)
        try:
            t = alpha_threshold_linear_detail(fa, mdp, beta, pi, q)
        except SingularSystemError:
            assume(False)
        y = bellman_policy_op(mdp, pi, q)
        target = expected_value_under_data(mdp, beta, pi, y)

        def penalized(alpha):
            return expected_value_under_data(mdp, beta, pi,
                                             cql_linear_iterate(fa, mdp, beta, pi, alpha, q).q_vector())

        scale = 1e-7 * (1.0 + abs(target))
        if not t.feasible:
            assert t.alpha == np.inf
            for alpha in (0.0, 1.0, 1e3):
                assert penalized(alpha) > target - scale
            return
        above = t.alpha * 1.01 + 1e-6
        assert penalized(above) <= target + scale
        if t.alpha > 1e-6 and t.denominator > 1e-6:
            assert penalized(t.alpha * 0.99 - 1e-6) >= target - scale

    def test_infeasible_logs_inf(self, chain, uniform2):
        # pi = pi_beta makes the penalty vanish; a feature set that projects
        # the backup down makes the right side positive
        f = np.array([[1.0], [0.0], [0.0], [0.0]])
        q = np.array([[0.0, 0.0], [0.0, 0.0]])
        t = alpha_threshold_linear_detail(LinearQModel.zeros(f), chain, uniform2, uniform2,
                                          q + np.array([[0, 0], [0, 0]]))
        assert t.denominator == pytest.approx(0.0, abs=1e-15)
        # r = (0, 1, 1, 0): the projection drops the reward, so the penalized
        # value is never above the plain one and alpha = 0 works
        assert t.feasible and t.alpha == 0.0

        beta = Policy(np.array([[0.5, 0.5], [0.5, 0.5]]))
        q2 = np.array([[-10.0, 0.0], [0.0, 0.0]])
        t2 = alpha_threshold_linear_detail(LinearQModel.zeros(f), chain, beta, beta, q2)
        assert not t2.feasible and t2.alpha == np.inf and t2.numerator > 0


class TestNtk:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_matches_weight_space_step(self, seed):
        mdp, pi, beta, fa, rng = _instance(seed)
        fa = fa.with_weights(rng.normal(size=fa.weights.size))
        q = fa.q(*mdp.shape)
        alpha, eta = float(rng.uniform(0, 3)), float(rng.uniform(0, 0.5))
        dens = data_density(mdp, beta)
        x = (pi.probs / beta.probs - 1.0).ravel()
        y = bellman_policy_op(mdp, pi, q).ravel()
        f = fa.features
        w = fa.weights - eta * alpha * f.T @ (dens * x) + eta * f.T @ (dens * (y - f @ fa.weights))
        np.testing.assert_allclose(ntk_gradient_step(fa, mdp, beta, pi, alpha, eta, q).ravel(),
                                   f @ w, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(ntk_gradient_step(fa, mdp, beta, pi, alpha, 0.0, q), q)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_penalty_part_of_expected_value(self, seed):
        mdp, pi, beta, fa, rng = _instance(seed)
        q = fa.q(*mdp.shape)
        alpha, eta = float(rng.uniform(0.1, 3)), float(rng.uniform(0.01, 0.5))
        with_pen = ntk_gradient_step(fa, mdp, beta, pi, alpha, eta, q)
        without = ntk_gradient_step(fa, mdp, beta, pi, 0.0, eta, q)
        drop = ((with_pen - without) * pi.probs).sum(axis=1)
        np.testing.assert_allclose(drop, -eta * alpha * ntk_penalty_term(fa, mdp, beta, pi),
                                   rtol=1e-9, atol=1e-10)

    def test_rank_one_counterexample(self, chain, uniform2, target82):
        f = np.array([1.0, 2.0, 0.0, 0.0])
        term = ntk_penalty_term(None, chain, uniform2, target82, m=np.outer(f, f))
        assert term[0] == pytest.approx(-0.198)
        assert term[1] == 0.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_inverse_density_kernel_gives_d_cql(self, seed):
        mdp, pi, beta, _, _ = _instance(seed)
        dens = data_density(mdp, beta)
        assume(np.all(dens > 1e-9))
        term = ntk_penalty_term(None, mdp, beta, pi, m=np.diag(1.0 / dens))
        np.testing.assert_allclose(term, d_cql(pi, beta), rtol=1e-8, atol=1e-10)
        assert np.all(term >= -1e-12)
