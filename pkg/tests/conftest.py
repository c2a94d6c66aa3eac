import numpy as np
import pytest

from tabular_cql.mdp import Policy, chain2, random_mdp, random_policy

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def chain():
    return chain2(gamma=0.9)


@pytest.fixture
def uniform2():
    return Policy.uniform(2, 2)


@pytest.fixture
def target82():
    return Policy(np.array([[0.8, 0.2], [0.8, 0.2]]))


def make_instance(seed, n_states=None, n_actions=None, min_prob=0.02):
    """Random MDP plus full-support behavior and target policies."""
    rng = np.random.default_rng(seed)
    n_s = n_states or int(rng.integers(1, 7))
    n_a = n_actions or int(rng.integers(1, 5))
    mdp = random_mdp(n_s, n_a, seed=int(rng.integers(2**31)),
                     gamma=float(rng.uniform(0.3, 0.95)))
    return (mdp, random_policy(n_s, n_a, rng), random_policy(n_s, n_a, rng, min_prob=min_prob),
            rng)
