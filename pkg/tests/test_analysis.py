import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabular_cql.analysis import (altered_reward_value, gap_expanding_check,
                                  lower_bounded_values_check, nu_necessity_search, nu_penalty,
                                  objective_equivalence_check, penalized_return,
                                  penalized_value, simplex_grid, worst_case_alpha, zeta_bound)
from tabular_cql.datasets import (ConcentrationConfig, TransitionDataset,
                                  build_empirical_model)
from tabular_cql.errors import SupportError
from tabular_cql.evaluation import d_cql
from tabular_cql.learning import CqlLearnConfig, run_cql
from tabular_cql.mdp import (Policy, chain2, exact_q, random_policy, return_j,
                             soft_policy_from_q)

from conftest import make_instance


def _bounded_q(mdp, rng):
    return rng.uniform(-1, 1, size=mdp.shape) * mdp.r_max / (1 - mdp.gamma)


class TestGapExpansion:
    def test_identical_iterates_need_no_alpha(self, chain, uniform2, target82):
        q = np.array([[1.0, 2.0], [0.5, -1.0]])
        rep = gap_expanding_check(chain, uniform2, q, q, target82, 0.5)
        assert rep.alpha_required == 0.0
        # margin = alpha * delta_hat with delta_hat = d_cql = 0.36
        np.testing.assert_allclose(rep.margin, 0.5 * 0.36)
        assert rep.holds

    def test_zero_alpha_is_not_strict(self, chain, uniform2, target82):
        q = np.zeros((2, 2))
        assert not gap_expanding_check(chain, uniform2, q, q, target82, 0.0).holds

    def test_mu_equal_to_behavior_is_vacuous(self, chain, uniform2):
        rep = gap_expanding_check(chain, uniform2, np.ones((2, 2)), np.zeros((2, 2)),
                                  uniform2, 0.0)
        assert rep.vacuous.all() and rep.holds and rep.alpha_required == 0.0

    def test_support_violation(self, chain):
        beta = Policy(np.array([[1.0, 0.0], [0.5, 0.5]]))
        with pytest.raises(SupportError):
            gap_expanding_check(chain, beta, np.zeros((2, 2)), np.zeros((2, 2)),
                                Policy.uniform(2, 2), 1.0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_required_alpha_is_the_threshold(self, seed):
        mdp, mu, beta, rng = make_instance(seed)
        q_hat, q = _bounded_q(mdp, rng), _bounded_q(mdp, rng)
        req = gap_expanding_check(mdp, beta, q_hat, q, mu, 0.0).alpha_required
        assert gap_expanding_check(mdp, beta, q_hat, q, mu, req * 1.001 + 1e-6).holds
        if req > 1e-3:
            assert not gap_expanding_check(mdp, beta, q_hat, q, mu, req * 0.99).holds

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_worst_case_alpha_dominates(self, seed):
        mdp, mu, beta, rng = make_instance(seed)
        q_hat = _bounded_q(mdp, rng)
        q = exact_q(mdp, random_policy(*mdp.shape, rng))
        req = gap_expanding_check(mdp, beta, q_hat, q, mu, 0.0).alpha_required
        assert worst_case_alpha(mdp, beta, q_hat, mu) >= req - 1e-9


class TestObjectiveEquivalence:
    def test_simplex_grid(self):
        g = simplex_grid(3, 0.5)
        assert g.shape == (6, 3)
        np.testing.assert_allclose(g.sum(axis=1), 1.0)
        with pytest.raises(ValueError):
            simplex_grid(2, 0.3)

    def test_alpha_zero_is_plain_return(self, chain, uniform2, target82):
        assert penalized_value(chain, target82, uniform2, 0.0) == pytest.approx(
            return_j(chain, target82))
        assert penalized_return(chain, target82, uniform2, 0.0) == pytest.approx(
            return_j(chain, target82))

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0, 4.0])
    def test_grid_argmax_matches(self, alpha):
        m = chain2(gamma=0.9, slip=0.1)
        beta = Policy(np.array([[0.7, 0.3], [0.4, 0.6]]))
        rep = objective_equivalence_check(m, beta, alpha, policy_grid_resolution=0.05)
        assert rep.match
        assert rep.max_abs_diff < 1e-8

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_three_forms_agree(self, seed):
        mdp, pi, beta, rng = make_instance(seed)
        alpha = float(rng.uniform(0, 3))
        a = penalized_value(mdp, pi, beta, alpha)
        b = penalized_return(mdp, pi, beta, alpha)
        c = altered_reward_value(mdp, pi, beta, alpha)
        scale = 1 + abs(a)
        assert abs(a - b) <= 1e-8 * scale and abs(a - c) <= 1e-8 * scale

    def test_too_many_states(self):
        mdp, _, beta, _ = make_instance(0, n_states=4, n_actions=2)
        with pytest.raises(ValueError):
            objective_equivalence_check(mdp, beta, 1.0)


def _exhaustive_model(m, repeats=1):
    """Every pair once per repeat; exact for deterministic MDPs."""
    s, a = np.divmod(np.arange(m.n_states * m.n_actions), m.n_actions)
    s, a = np.tile(s, repeats), np.tile(a, repeats)
    nxt = m.transition[s, a].argmax(axis=1)
    ds = TransitionDataset(s, a, m.reward[s, a], nxt)
    return build_empirical_model(ds, m)


class TestZeta:
    def test_exact_model_with_zero_constants(self):
        m = chain2(gamma=0.9)
        model = _exhaustive_model(m, repeats=2)
        np.testing.assert_allclose(model.to_mdp(m.initial_dist).transition, m.transition)
        pi_star = Policy.deterministic([1, 0], 2)
        rep = zeta_bound(m, model, pi_star, ConcentrationConfig(0.0, 0.0))
        assert rep.sampling_term == 0.0
        assert rep.j_pi_star_m == pytest.approx(rep.j_pi_star_m_hat)
        assert rep.zeta == pytest.approx(-(rep.j_pi_star_m - rep.j_beta_m))
        assert rep.holds and rep.lemma_holds_pi_star and rep.lemma_holds_beta

    def test_behavior_as_pi_star(self):
        m = chain2(gamma=0.9)
        model = _exhaustive_model(m, repeats=3)
        rep = zeta_bound(m, model, model.pi_beta_hat, ConcentrationConfig(0.5, 0.5))
        assert rep.improvement_term == 0.0
        assert rep.zeta == pytest.approx(2 * rep.lemma_bound_pi_star)
        assert rep.zeta > 0 and rep.holds

    def test_sampling_term_scales_with_counts(self):
        m = chain2(gamma=0.9)
        cfg = ConcentrationConfig(1.0, 1.0)
        pi = Policy.uniform(2, 2)
        few = zeta_bound(m, _exhaustive_model(m, 1), pi, cfg).lemma_bound_pi_star
        many = zeta_bound(m, _exhaustive_model(m, 16), pi, cfg).lemma_bound_pi_star
        # 1 / sqrt(|D(s)|) shrinks by a factor of 4
        assert many == pytest.approx(few / 4)


class TestNecessity:
    def test_example(self):
        beta = Policy.uniform(1, 2)
        nu = Policy(np.array([[1.0, 0.0]]))
        res = nu_necessity_search(beta, nu)
        np.testing.assert_allclose(res.witness_pi.probs, [[0.75, 0.25]])
        np.testing.assert_allclose(res.min_penalty, [-0.25])
        grid = simplex_grid(2, 1e-3)
        values = [nu_penalty(Policy(row[None, :]), nu, beta)[0] for row in grid]
        assert min(values) == pytest.approx(-0.25, abs=1e-6)
        assert grid[int(np.argmin(values))] == pytest.approx([0.75, 0.25])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_minimum_is_quarter_chi_square(self, seed):
        rng = np.random.default_rng(seed)
        n_s, n_a = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        beta = random_policy(n_s, n_a, rng, min_prob=0.01)
        nu = random_policy(n_s, n_a, rng)
        res = nu_necessity_search(beta, nu)
        chi2 = ((nu.probs - beta.probs) ** 2 / beta.probs).sum(axis=1)
        np.testing.assert_allclose(res.min_penalty, -chi2 / 4, rtol=1e-9, atol=1e-12)
        # no random policy does better
        for _ in range(20):
            pi = random_policy(n_s, n_a, rng)
            assert np.all(nu_penalty(pi, nu, beta) >= res.min_penalty - 1e-12)

    def test_zero_only_at_behavior(self):
        beta = Policy(np.array([[0.2, 0.8]]))
        assert nu_necessity_search(beta, beta).min_penalty[0] == pytest.approx(0.0)

    def test_requires_positive_behavior(self):
        with pytest.raises(SupportError):
            nu_necessity_search(Policy(np.array([[1.0, 0.0]])), Policy.uniform(1, 2))


class TestLowerBoundedValues:
    @pytest.mark.parametrize("seed", range(8))
    def test_implication_on_run_iterates(self, seed):
        mdp, _, beta, rng = make_instance(seed, min_prob=0.05)
        cfg = CqlLearnConfig(alpha=float(rng.uniform(0.1, 2.0)), temperature=1.0,
                             policy_step=0.2, iters=20)
        res = run_cql(cfg, mdp, beta, keep_iterates=True)
        for q_k, _, pi_k, pi_next, alpha in res.trace.iterates:
            step = lower_bounded_values_check(cfg, mdp, q_k, pi_k, pi_next, alpha, beta)
            assert step.implication_holds

    def test_condition_at_fixed_softmax(self, chain, uniform2):
        # pi_next = softmax(Q_k) gives eps = 0, so the condition reduces to d_cql >= 0
        q = np.array([[1.0, 0.0], [0.0, 2.0]])
        pi_q = soft_policy_from_q(q)
        step = lower_bounded_values_check(CqlLearnConfig(), chain, q, pi_q, pi_q, 1.0, uniform2)
        assert step.condition.all()
        np.testing.assert_allclose(step.epsilon, 0.0)
        assert step.implication_holds and not step.vacuous
        np.testing.assert_allclose(step.v - step.v_hat, d_cql(pi_q, uniform2), atol=1e-12)

    def test_only_entropy_regularizer(self, chain, uniform2):
        with pytest.raises(ValueError):
            lower_bounded_values_check(CqlLearnConfig(regularizer="var"), chain,
                                       np.zeros((2, 2)), uniform2, uniform2, 1.0, uniform2)
