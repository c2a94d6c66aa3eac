import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabular_cql.datasets import (ConcentrationConfig, TransitionDataset,
                                  build_empirical_model, dataset_from_csv, dataset_to_csv,
                                  empirical_bellman_op, empirical_optimality_op,
                                  estimate_concentration, load_dataset, model_to_json,
                                  overestimation_bound, sample_dataset, save_dataset)
from tabular_cql.errors import ShapeError
from tabular_cql.mdp import (Policy, TabularMdp, bellman_optimality_op, bellman_policy_op,
                             chain2, exact_q, random_mdp)


def _single_state():
    return TabularMdp(np.ones((1, 1, 1)), np.array([[0.7]]), 0.9, np.array([1.0]), 1.0)


def _exhaustive(mdp, repeats=1):
    """Every (s, a, s') with positive probability, ``repeats`` times."""
    rows = [(s, a, mdp.reward[s, a], s2)
            for s in range(mdp.n_states) for a in range(mdp.n_actions)
            for s2 in range(mdp.n_states) if mdp.transition[s, a, s2] > 0] * repeats
    return TransitionDataset(*map(np.array, zip(*rows)))


class TestSampling:
    def test_single_tuple(self):
        ds = sample_dataset(_single_state(), Policy.uniform(1, 1), 1, 5, seed=0)
        assert len(ds) == 1
        assert (ds.states[0], ds.actions[0], ds.rewards[0], ds.next_states[0]) == (0, 0, 0.7, 0)

    def test_deterministic_trajectory(self, chain):
        ds = sample_dataset(chain, Policy.deterministic([1, 1], 2), 25, 10, seed=3)
        # start in s0 and alternate: s0 -> s1 -> s0 ...; episodes restart at s0
        t = np.arange(25) % 10
        np.testing.assert_array_equal(ds.states, t % 2)
        np.testing.assert_array_equal(ds.next_states, 1 - t % 2)
        np.testing.assert_array_equal(ds.actions, 1)

    def test_reproducible_and_seed_dependent(self):
        m = random_mdp(4, 3, seed=1)
        a = sample_dataset(m, Policy.uniform(4, 3), 300, 20, seed=5)
        b = sample_dataset(m, Policy.uniform(4, 3), 300, 20, seed=5)
        c = sample_dataset(m, Policy.uniform(4, 3), 300, 20, seed=6)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.rewards, b.rewards)
        assert not np.array_equal(a.actions, c.actions)

    def test_horizon_truncation(self, chain):
        ds = sample_dataset(chain, Policy.deterministic([0, 0], 2), 12, 4, seed=0)
        np.testing.assert_array_equal(ds.states, 0)

    def test_invalid_sizes(self, chain, uniform2):
        with pytest.raises(ValueError):
            sample_dataset(chain, uniform2, 0, 5, 0)
        with pytest.raises(ValueError):
            sample_dataset(chain, uniform2, 5, 0, 0)
        with pytest.raises(ShapeError):
            sample_dataset(chain, Policy.uniform(3, 2), 5, 5, 0)

    def test_chain2_action_frequencies(self, chain, uniform2):
        model = build_empirical_model(sample_dataset(chain, uniform2, 10**5, 50, seed=0), chain)
        freq = model.pi_beta_hat.probs
        assert np.abs(freq - 0.5).max() <= 0.01
        assert np.abs(freq - uniform2.probs).max() <= 0.02

    def test_bernoulli_rewards_unbiased(self):
        m = chain2(reward_low=0.25, reward_high=0.75)
        ds = sample_dataset(m, Policy.uniform(2, 2), 40_000, 40, seed=2, reward_noise="bernoulli")
        assert set(np.unique(ds.rewards)) <= {0.0, 0.75}
        model = build_empirical_model(ds, m)
        np.testing.assert_allclose(model.r_hat, m.reward, atol=0.02)

    def test_nested_prefixes(self, chain, uniform2):
        big = sample_dataset(chain, uniform2, 500, 20, seed=4)
        small = sample_dataset(chain, uniform2, 200, 20, seed=4)
        # the first 200 tuples do not depend on how many are requested
        np.testing.assert_array_equal(big.head(200).states, small.states[:200])


class TestEmpiricalModel:
    def test_single_tuple_model(self, chain):
        ds = TransitionDataset([1], [0], [1.0], [1])
        model = build_empirical_model(ds, chain)
        np.testing.assert_array_equal(model.pi_beta_hat.probs[1], [1.0, 0.0])
        np.testing.assert_array_equal(model.pi_beta_hat.probs[0], [0.5, 0.5])
        assert model.visited_states.tolist() == [False, True]

    def test_exhaustive_noiseless_data(self):
        m = random_mdp(3, 2, branching=1, seed=2)
        model = build_empirical_model(_exhaustive(m), m)
        np.testing.assert_array_equal(model.r_hat, m.reward)
        np.testing.assert_array_equal(model.t_hat, m.transition)
        # repeated observations average to r up to rounding of the mean
        np.testing.assert_allclose(build_empirical_model(_exhaustive(m, 3), m).r_hat, m.reward,
                                   rtol=1e-15)
        q = np.random.default_rng(0).normal(size=m.shape)
        pi = Policy.uniform(3, 2)
        np.testing.assert_array_equal(empirical_bellman_op(model, pi, q),
                                      bellman_policy_op(m, pi, q))
        np.testing.assert_array_equal(empirical_optimality_op(model, q),
                                      bellman_optimality_op(m, q))

    def test_zero_q_gives_r_hat(self, chain, uniform2):
        model = build_empirical_model(sample_dataset(chain, uniform2, 50, 10, 0), chain)
        out = empirical_bellman_op(model, uniform2, np.zeros((2, 2)))
        vis = model.visited_pairs
        np.testing.assert_array_equal(out[vis], model.r_hat[vis])

    def test_unvisited_pairs(self, chain):
        model = build_empirical_model(TransitionDataset([0, 0], [0, 0], [0.0, 0.0], [0, 0]), chain)
        floor = -2 * 1.0 / (1 - 0.9)
        out = empirical_bellman_op(model, Policy.uniform(2, 2), np.ones((2, 2)))
        assert out[0, 0] == pytest.approx(0.9)
        np.testing.assert_array_equal(out[~model.visited_pairs], floor)
        assert model.inv_sqrt_counts[0, 0] == 1 / np.sqrt(2)
        np.testing.assert_array_equal(model.inv_sqrt_counts[~model.visited_pairs], -floor)
        # the empirical MDP is a valid MDP with self-loops at unvisited pairs
        mhat = model.to_mdp()
        assert mhat.transition[1, 1, 1] == 1.0 and mhat.reward[1, 1] == -1.0

    def test_sentinel_lower_limit(self, chain, uniform2):
        ds = sample_dataset(chain, uniform2, 10, 5, 0)
        with pytest.raises(ValueError):
            build_empirical_model(ds, chain, sentinel=5.0)
        assert build_empirical_model(ds, chain, sentinel=50.0).sentinel == 50.0

    def test_empty_dataset(self, chain):
        with pytest.raises(ValueError):
            build_empirical_model(TransitionDataset([], [], [], []), chain)

    def test_out_of_range(self, chain):
        with pytest.raises(ValueError):
            build_empirical_model(TransitionDataset([2], [0], [0.0], [0]), chain)

    def test_chain2_transition_frequencies(self, uniform2):
        m = chain2(slip=0.2)
        model = build_empirical_model(sample_dataset(m, uniform2, 10**5, 50, seed=1), m)
        assert np.abs(model.t_hat - m.transition).max() <= 0.01

    @given(st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_row_sums(self, seed):
        m = random_mdp(4, 3, seed=seed % 97)
        model = build_empirical_model(sample_dataset(m, Policy.uniform(4, 3), 60, 7, seed), m)
        vis = model.visited_pairs
        np.testing.assert_allclose(model.t_hat[vis].sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(model.t_hat[~vis], 0.0)
        np.testing.assert_allclose(model.pi_beta_hat.probs.sum(axis=1), 1.0, atol=1e-12)
        assert model.counts.sum() == 60 == model.state_counts.sum()

    def test_model_json(self, chain, uniform2):
        model = build_empirical_model(sample_dataset(chain, uniform2, 30, 5, 0), chain)
        assert '"counts"' in model_to_json(model)


class TestConcentration:
    def test_known_bound(self, chain):
        ds = TransitionDataset([0] * 100, [0] * 100, [0.0] * 100, [0] * 100)
        model = build_empirical_model(ds, chain)
        bound = overestimation_bound(model, ConcentrationConfig(1.0, 1.0), 0.9, 1.0)
        assert bound[0, 0] == pytest.approx(1.9)

    def test_zero_constants(self, chain, uniform2):
        model = build_empirical_model(sample_dataset(chain, uniform2, 50, 10, 0), chain)
        np.testing.assert_array_equal(overestimation_bound(model, ConcentrationConfig(0, 0)), 0)

    def test_huge_counts(self, chain):
        n = 10**12
        model = build_empirical_model(TransitionDataset([0], [0], [0.0], [0]), chain)
        # rebuild inverse roots as if every pair had n samples
        fake = type(model)(**{**model.__dict__,
                              "inv_sqrt_counts": np.full((2, 2), 1 / np.sqrt(n))})
        assert overestimation_bound(fake, ConcentrationConfig(1, 1)).max() < 1e-4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ConcentrationConfig(-1.0, 1.0)
        with pytest.raises(ValueError):
            ConcentrationConfig(1.0, 1.0, delta=1.0)

    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0.1, 4))
    @settings(max_examples=50, deadline=None)
    def test_linear_in_constants_and_monotone(self, c_r, c_t, scale):
        chain = chain2()
        ds = TransitionDataset([0] * 9 + [1] * 4, [0] * 13, [0.0] * 13, [0] * 9 + [1] * 4)
        model = build_empirical_model(ds, chain)
        b = overestimation_bound(model, ConcentrationConfig(c_r, c_t))
        b2 = overestimation_bound(model, ConcentrationConfig(scale * c_r, scale * c_t))
        np.testing.assert_allclose(b2, scale * b, rtol=1e-12, atol=1e-300)
        # more samples, smaller bound
        assert b[0, 0] <= b[1, 0]

    def test_empirical_backup_within_calibrated_bound(self):
        m = chain2(slip=0.1, reward_low=0.25, reward_high=0.75)
        beta = Policy.uniform(2, 2)
        n, horizon, delta = 10**4, 50, 0.1
        cfg = estimate_concentration(m, beta, n, horizon, delta, n_resamples=200, seed=99,
                                     reward_noise="bernoulli")
        q = exact_q(m, beta)
        bad = 0
        for seed in range(200):
            model = build_empirical_model(
                sample_dataset(m, beta, n, horizon, seed, "bernoulli"), m)
            err = np.abs(empirical_bellman_op(model, beta, q) - bellman_policy_op(m, beta, q))
            vis = model.visited_pairs
            bad += bool(np.any(err[vis] > overestimation_bound(model, cfg)[vis]))
        assert bad / 200 <= delta


class TestCsv:
    def test_round_trip(self, tmp_path, chain, uniform2):
        ds = sample_dataset(chain2(reward_low=0.25, reward_high=0.75), uniform2, 40, 6, 8,
                            reward_noise="bernoulli")
        save_dataset(ds, tmp_path / "d.csv")
        back = load_dataset(tmp_path / "d.csv")
        for col in ("states", "actions", "rewards", "next_states"):
            np.testing.assert_array_equal(getattr(back, col), getattr(ds, col))
        assert back.rng_seed == 8

    def test_header(self, chain, uniform2):
        text = dataset_to_csv(sample_dataset(chain, uniform2, 3, 3, 1))
        lines = text.splitlines()
        assert lines[0] == "# mdp_id=chain2 seed=1" and lines[1] == "s,a,r,s_next"
        assert len(lines) == 5

    def test_rejects_missing_header(self):
        with pytest.raises(ValueError):
            dataset_from_csv("s,a,r,s_next\n0,0,0.0,0\n")
