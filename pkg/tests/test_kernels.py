import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tabular_cql import _kernels
from tabular_cql.mdp import Policy, gridworld, random_mdp, random_policy

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba is not installed")
IMPL = _kernels.IMPLEMENTATIONS


def _cdfs(mdp, policy):
    return (_kernels.cumulative(mdp.initial_dist), _kernels.cumulative(policy.probs),
            _kernels.cumulative(mdp.transition))


def test_cumulative_pins_last_entry():
    cdf = _kernels.cumulative(np.array([[0.1, 0.2, 0.7000000000000001]]))
    assert cdf[0, -1] == 1.0
    np.testing.assert_allclose(cdf[0], [0.1, 0.3, 1.0])


def test_draw_rows_respects_cdf():
    cdf = np.array([[0.2, 0.5, 1.0]] * 4)
    u = np.array([0.0, 0.2, 0.49, 0.99])
    np.testing.assert_array_equal(_kernels._draw_rows(cdf, u), [0, 1, 1, 2])


@needs_numba
@pytest.mark.parametrize("bernoulli", [False, True])
def test_rollouts_backends_identical(bernoulli):
    m = random_mdp(7, 3, seed=1)
    beta = random_policy(7, 3, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    n, h = 995, 20
    n_ep = -(-n // h)
    u_init, u = rng.random(n_ep), rng.random((n_ep, h, 3))
    args = (*_cdfs(m, beta), np.ascontiguousarray(m.reward), m.r_max, bernoulli, n, h, u_init, u)
    for a, b in zip(IMPL["rollouts"]["numba"](*args), IMPL["rollouts"]["numpy"](*args)):
        np.testing.assert_array_equal(a, b)


@needs_numba
def test_counts_backends_identical():
    rng = np.random.default_rng(0)
    n = 5000
    s, a, s2 = rng.integers(0, 6, n), rng.integers(0, 3, n), rng.integers(0, 6, n)
    r = rng.random(n)
    out_nb = IMPL["counts"]["numba"](s, a, r, s2, 6, 3)
    out_np = IMPL["counts"]["numpy"](s, a, r, s2, 6, 3)
    np.testing.assert_array_equal(out_nb[0], out_np[0])
    np.testing.assert_allclose(out_nb[1], out_np[1], rtol=1e-12)
    np.testing.assert_array_equal(out_nb[2], out_np[2])
    assert out_np[0].sum() == n and out_np[2].sum() == n


@needs_numba
@pytest.mark.parametrize("bound", [np.inf, 3.0])
def test_affine_fixed_point_backends_agree(bound):
    m = gridworld(4, 3, gamma=0.9)
    pi = Policy.uniform(12, 4)
    c = np.ascontiguousarray(m.reward - 0.3)
    args = (c, np.ascontiguousarray(m.transition), np.ascontiguousarray(pi.probs), m.gamma,
            1e-12, 10_000, -bound, bound, np.zeros(m.shape))
    q_nb, it_nb, res_nb = IMPL["affine_fixed_point"]["numba"](*args)
    q_np, it_np, res_np = IMPL["affine_fixed_point"]["numpy"](*args)
    np.testing.assert_allclose(q_nb, q_np, atol=1e-10)
    assert res_nb <= 1e-12 and res_np <= 1e-12
    assert abs(it_nb - it_np) <= 1
    assert np.all(np.abs(q_np) <= bound)


def test_affine_fixed_point_iteration_cap():
    m = gridworld(2, 2, gamma=0.99)
    pi = Policy.uniform(4, 4)
    q, it, res = _kernels.affine_fixed_point(
        np.ascontiguousarray(m.reward), np.ascontiguousarray(m.transition),
        np.ascontiguousarray(pi.probs), m.gamma, 1e-14, 5, -np.inf, np.inf, np.zeros(m.shape))
    assert it == 5 and res > 1e-14


@needs_numba
def test_discounted_returns_backends_identical():
    m = random_mdp(5, 2, seed=9)
    pi = random_policy(5, 2, np.random.default_rng(1))
    rng = np.random.default_rng(4)
    u_init, u = rng.random(300), rng.random((300, 40, 2))
    args = (*_cdfs(m, pi), np.ascontiguousarray(m.reward), m.gamma, u_init, u)
    np.testing.assert_allclose(IMPL["discounted_returns"]["numba"](*args),
                               IMPL["discounted_returns"]["numpy"](*args), rtol=1e-12)


_SNIPPET = """
import json
from tabular_cql import _kernels
from tabular_cql.datasets import sample_dataset
from tabular_cql.mdp import Policy, random_mdp
m = random_mdp(6, 3, seed=11)
ds = sample_dataset(m, Policy.uniform(6, 3), 777, 25, 5, reward_noise="bernoulli")
print(json.dumps({"backend": _kernels.BACKEND,
                  "data": [ds.states.tolist(), ds.actions.tolist(),
                           ds.rewards.tolist(), ds.next_states.tolist()]}))
"""


def _run_snippet(disable):
    env = dict(os.environ)
    env.pop(_kernels.DISABLE_ENV, None)
    if disable:
        env[_kernels.DISABLE_ENV] = "1"
    out = subprocess.run([sys.executable, "-c", _SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout)


@needs_numba
def test_env_flag_selects_numpy_with_identical_datasets():
    fast, slow = _run_snippet(False), _run_snippet(True)
    assert fast["backend"] == "numba"
    assert slow["backend"] == "numpy"
    assert fast["data"] == slow["data"]
