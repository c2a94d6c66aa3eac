"""Finite MDPs, policies, and exact dynamic-programming primitives.

Q-tables are plain ``(n_states, n_actions)`` float arrays and value tables
are ``(n_states,)`` arrays.  MDPs and policies are frozen dataclasses whose
arrays are read-only, so every function here is pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import ConvergenceError, ShapeError, SingularSystemError

PROB_TOL = 1e-12
# above this many state-action pairs exact_q switches to iterative sweeps
DIRECT_SOLVE_LIMIT = 4000


def _frozen(x, dtype=np.float64) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_distribution(probs: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(probs)):
        raise ValueError(f"{what} has non-finite entries")
    if np.any(probs < 0):
        raise ValueError(f"{what} has negative entries")
    err = np.max(np.abs(probs.sum(axis=-1) - 1.0))
    if err > PROB_TOL:
        raise ValueError(f"{what} rows do not sum to 1 (max error {err:.3g})")


@dataclass(frozen=True)
class TabularMdp:
    """Finite discounted MDP with a known reward bound.

    ``transition[s, a, s2]`` is P(s2 | s, a); ``reward[s, a]`` is the expected
    reward; ``initial_dist`` is the start-state distribution.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    r_max: float
    name: str = "mdp"

    def __post_init__(self):
        t = _frozen(self.transition)
        r = _frozen(self.reward)
        rho = _frozen(self.initial_dist)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ShapeError(f"transition must have shape (S, A, S), got {t.shape}")
        n_s, n_a = t.shape[:2]
        if n_s < 1 or n_a < 1:
            raise ShapeError("need at least one state and one action")
        if r.shape != (n_s, n_a):
            raise ShapeError(f"reward must have shape {(n_s, n_a)}, got {r.shape}")
        if rho.shape != (n_s,):
            raise ShapeError(f"initial_dist must have shape {(n_s,)}, got {rho.shape}")
        _check_distribution(t, "transition")
        _check_distribution(rho, "initial_dist")
        gamma = float(self.gamma)
        if not 0.0 < gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
        r_max = float(self.r_max)
        if not np.all(np.isfinite(r)):
            raise ValueError("reward has non-finite entries")
        if not np.isfinite(r_max) or r_max < 0 or np.max(np.abs(r)) > r_max + PROB_TOL:
            raise ValueError(f"|reward| exceeds r_max={r_max}")
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.transition.shape[:2]

    @property
    def q_bound(self) -> float:
        """Clamp radius 2 * r_max / (1 - gamma)."""
        return 2.0 * self.r_max / (1.0 - self.gamma)

    def with_gamma(self, gamma: float) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, gamma, self.initial_dist,
                          self.r_max, self.name)

    def with_initial_dist(self, initial_dist) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, self.gamma, initial_dist,
                          self.r_max, self.name)


@dataclass(frozen=True)
class Policy:
    """Row-stochastic action distribution ``probs[s, a]``."""

    probs: np.ndarray = field()

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ShapeError(f"policy must be 2-D, got shape {p.shape}")
        _check_distribution(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @classmethod
    def greedy(cls, q: np.ndarray) -> "Policy":
        """Argmax policy; ties go to the lowest action index."""
        q = np.asarray(q, dtype=np.float64)
        return cls.deterministic(np.argmax(q, axis=1), q.shape[1])

    @classmethod
    def mixture(cls, first: "Policy", second: "Policy", weight: float) -> "Policy":
        """``(1 - weight) * first + weight * second``."""
        if first.shape != second.shape:
            raise ShapeError("mixture of policies with different shapes")
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"mixture weight must lie in [0, 1], got {weight}")
        return cls((1.0 - weight) * first.probs + weight * second.probs)

    @classmethod
    def from_unnormalized(cls, weights) -> "Policy":
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum(axis=1, keepdims=True))


def _check_policy(mdp: TabularMdp, policy: Policy) -> None:
    if policy.shape != mdp.shape:
        raise ShapeError(f"policy shape {policy.shape} does not match MDP {mdp.shape}")


def _check_q(mdp: TabularMdp, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != mdp.shape:
        raise ShapeError(f"Q shape {q.shape} does not match MDP {mdp.shape}")
    return q


# ---------------------------------------------------------------------------
# Bellman operators

def expected_q(policy: Policy, q) -> np.ndarray:
    """V(s) = sum_a pi(a|s) Q(s, a)."""
    return np.einsum("sa,sa->s", policy.probs, np.asarray(q, dtype=np.float64))


def bellman_policy_op(mdp: TabularMdp, policy: Policy, q) -> np.ndarray:
    """(B^pi Q)(s,a) = r(s,a) + gamma * E_{s'}[E_{a'~pi} Q(s',a')]."""
    _check_policy(mdp, policy)
    q = _check_q(mdp, q)
    return mdp.reward + mdp.gamma * (mdp.transition @ expected_q(policy, q))


def bellman_optimality_op(mdp: TabularMdp, q) -> np.ndarray:
    """(B* Q)(s,a) = r(s,a) + gamma * E_{s'}[max_a' Q(s',a')]."""
    q = _check_q(mdp, q)
    return mdp.reward + mdp.gamma * (mdp.transition @ q.max(axis=1))


def sa_transition_matrix(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """P^pi over flattened state-action pairs: T(s'|s,a) * pi(a'|s')."""
    _check_policy(mdp, policy)
    n = mdp.n_states * mdp.n_actions
    return (mdp.transition[:, :, :, None] * policy.probs[None, None]).reshape(n, n)


def state_transition_matrix(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """P^pi_state[s, s'] = sum_a pi(a|s) T(s'|s,a)."""
    _check_policy(mdp, policy)
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return linalg.solve(a, b, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc


def solve_policy_affine(mdp: TabularMdp, policy: Policy, c,
                        method: str = "auto", tol: float = 1e-12,
                        max_iters: int = 1_000_000) -> np.ndarray:
    """Fixed point of Q = c + gamma * P^pi Q.

    ``method`` is "direct" (dense LU), "iterative" (sweeps), or "auto" which
    picks direct unless the state-action space is large.
    """
    _check_policy(mdp, policy)
    c = _check_q(mdp, c)
    n = mdp.n_states * mdp.n_actions
    if method == "auto":
        method = "direct" if n <= DIRECT_SOLVE_LIMIT else "iterative"
    if method == "direct":
        a = np.eye(n) - mdp.gamma * sa_transition_matrix(mdp, policy)
        return _solve(a, c.reshape(n)).reshape(mdp.shape)
    if method != "iterative":
        raise ValueError(f"unknown method {method!r}")
    q, iters, residual = _kernels.affine_fixed_point(
        c, np.ascontiguousarray(mdp.transition), np.ascontiguousarray(policy.probs),
        mdp.gamma, tol, max_iters, -np.inf, np.inf, np.zeros(mdp.shape))
    if residual > tol:
        raise ConvergenceError(
            f"policy evaluation did not reach tol {tol} in {iters} sweeps", iters, residual)
    return q


def exact_q(mdp: TabularMdp, policy: Policy, method: str = "auto") -> np.ndarray:
    """Q^pi = (I - gamma P^pi)^{-1} r."""
    return solve_policy_affine(mdp, policy, mdp.reward, method=method)


def policy_value(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """V^pi(s) = E_{a~pi} Q^pi(s, a)."""
    return expected_q(policy, exact_q(mdp, policy))


def return_j(mdp: TabularMdp, policy: Policy) -> float:
    """Expected discounted return from the initial distribution (unnormalized)."""
    return float(mdp.initial_dist @ policy_value(mdp, policy))


def discounted_state_marginal(mdp: TabularMdp, policy: Policy,
                              initial_dist=None) -> np.ndarray:
    """d(s) = (1 - gamma) sum_t gamma^t Pr(s_t = s); sums to one."""
    rho = mdp.initial_dist if initial_dist is None else np.asarray(initial_dist, float)
    p = state_transition_matrix(mdp, policy)
    a = np.eye(mdp.n_states) - mdp.gamma * p.T
    return _solve(a, (1.0 - mdp.gamma) * rho)


def soft_policy_from_q(q, temperature: float = 1.0) -> Policy:
    """Row-wise softmax of Q / temperature."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or not np.all(np.isfinite(q)):
        raise ValueError("Q must be a finite 2-D array")
    z = q / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return Policy(e / e.sum(axis=1, keepdims=True))


def total_variation(p: Policy, q: Policy) -> np.ndarray:
    """Per-state total variation distance."""
    if p.shape != q.shape:
        raise ShapeError(f"policy shapes differ: {p.shape} vs {q.shape}")
    return 0.5 * np.abs(p.probs - q.probs).sum(axis=1)


def clamp_q(mdp: TabularMdp, q) -> np.ndarray:
    b = mdp.q_bound
    return np.clip(np.asarray(q, dtype=np.float64), -b, b)


def monte_carlo_return(mdp: TabularMdp, policy: Policy, n_trajectories: int,
                       horizon: int | None = None, seed: int = 0,
                       batch: int = 10_000) -> tuple[float, float]:
    """Mean and standard error of truncated discounted returns.

    The default horizon makes the truncation bias below 1e-12 * r_max / (1 - gamma).
    """
    _check_policy(mdp, policy)
    if horizon is None:
        horizon = int(np.ceil(np.log(1e-12) / np.log(mdp.gamma)))
    rng = np.random.default_rng(seed)
    init_cdf = _kernels.cumulative(mdp.initial_dist)
    pol_cdf = _kernels.cumulative(policy.probs)
    trans_cdf = _kernels.cumulative(mdp.transition)
    reward = np.ascontiguousarray(mdp.reward)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_trajectories:
        m = min(batch, n_trajectories - done)
        u_init = rng.random(m)
        u = rng.random((m, horizon, 2))
        g = _kernels.discounted_returns(init_cdf, pol_cdf, trans_cdf, reward,
                                        mdp.gamma, u_init, u)
        total += g.sum()
        total_sq += (g * g).sum()
        done += m
    mean = total / n_trajectories
    var = max(total_sq / n_trajectories - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var / n_trajectories))


# ---------------------------------------------------------------------------
# constructors

def chain2(gamma: float = 0.9, slip: float = 0.0, reward_low: float = 0.0,
           reward_high: float = 1.0, initial_dist=(1.0, 0.0)) -> TabularMdp:
    """Two states; a0 stays, a1 switches; reward is ``reward_high`` in s1.

    With probability ``slip`` the other action's transition is taken.
    """
    stay = np.array([[1.0, 0.0], [0.0, 1.0]])
    swap = stay[::-1]
    t = np.empty((2, 2, 2))
    t[:, 0] = (1 - slip) * stay + slip * swap
    t[:, 1] = (1 - slip) * swap + slip * stay
    r = np.array([[reward_low, reward_low], [reward_high, reward_high]])
    r_max = max(abs(reward_low), abs(reward_high))
    name = "chain2" if slip == 0 else f"chain2-slip{slip:g}"
    return TabularMdp(t, r, gamma, np.asarray(initial_dist, float), r_max, name)


# up, right, down, left as (dx, dy) with y growing upward
GRID_MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))


def gridworld(width: int, height: int, slip: float = 0.1, gamma: float = 0.9,
              goal_reward: float = 1.0) -> TabularMdp:
    """Grid with four moves; reward on leaving the top-right cell.

    With probability ``slip`` the move direction is replaced by a uniformly
    random one.  Moves off the grid leave the agent in place.  State index
    is ``y * width + x``.
    """
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be positive")
    n = width * height
    t = np.zeros((n, 4, n))
    for y in range(height):
        for x in range(width):
            s = y * width + x
            for a in range(4):
                for b, (dx, dy) in enumerate(GRID_MOVES):
                    p = slip / 4 + (1 - slip) * (a == b)
                    nx = min(max(x + dx, 0), width - 1)
                    ny = min(max(y + dy, 0), height - 1)
                    t[s, a, ny * width + nx] += p
    r = np.zeros((n, 4))
    r[n - 1] = goal_reward
    return TabularMdp(t, r, gamma, np.full(n, 1.0 / n), abs(goal_reward),
                      f"gridworld-{width}x{height}")


def random_mdp(n_states: int, n_actions: int, branching: int | None = None,
               seed: int = 0, gamma: float = 0.9, r_max: float = 1.0,
               concentration: float = 1.0) -> TabularMdp:
    """Dirichlet transition rows over ``branching`` random successors,
    uniform rewards in [0, r_max], uniform start distribution."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    branching = n_states if branching is None else branching
    if not 1 <= branching <= n_states:
        raise ValueError(f"branching must lie in [1, {n_states}]")
    rng = np.random.default_rng(seed)
    t = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            t[s, a, succ] = rng.dirichlet(np.full(branching, concentration))
    # dirichlet rows can drift from 1 by an ulp or two
    t /= t.sum(axis=2, keepdims=True)
    r = rng.uniform(0.0, r_max, size=(n_states, n_actions))
    return TabularMdp(t, r, gamma, np.full(n_states, 1.0 / n_states), r_max,
                      f"random-{n_states}x{n_actions}-b{branching}-seed{seed}")


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator,
                  min_prob: float = 0.0) -> Policy:
    """Dirichlet(1) rows, optionally mixed with uniform to keep ``min_prob`` mass."""
    p = rng.dirichlet(np.ones(n_actions), size=n_states)
    if min_prob > 0:
        p = (1 - min_prob * n_actions) * p + min_prob
    return Policy.from_unnormalized(p)


# ---------------------------------------------------------------------------
# serialization

def mdp_to_dict(mdp: TabularMdp) -> dict:
    return {
        "name": mdp.name,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "r_max": mdp.r_max,
        "reward": mdp.reward.ravel().tolist(),
        "transition": mdp.transition.ravel().tolist(),
        "initial_dist": mdp.initial_dist.tolist(),
    }


def mdp_from_dict(data: dict) -> TabularMdp:
    try:
        n_s = int(data["n_states"])
        n_a = int(data["n_actions"])
        reward = np.asarray(data["reward"], dtype=np.float64).reshape(n_s, n_a)
        transition = np.asarray(data["transition"], dtype=np.float64).reshape(n_s, n_a, n_s)
        return TabularMdp(transition, reward, float(data["gamma"]),
                          np.asarray(data["initial_dist"], dtype=np.float64),
                          float(data["r_max"]), str(data.get("name", "mdp")))
    except KeyError as exc:
        raise ValueError(f"MDP file is missing key {exc}") from exc


def mdp_to_json(mdp: TabularMdp) -> str:
    return json.dumps(mdp_to_dict(mdp), indent=1) + "\n"


def mdp_from_json(text: str) -> TabularMdp:
    return mdp_from_dict(json.loads(text))


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(mdp_to_json(mdp))


def load_mdp(path) -> TabularMdp:
    return mdp_from_json(Path(path).read_text())


def policy_to_dict(policy: Policy) -> dict:
    n_s, n_a = policy.shape
    return {"n_states": n_s, "n_actions": n_a, "probs": policy.probs.ravel().tolist()}


def policy_from_dict(data: dict) -> Policy:
    return Policy(np.asarray(data["probs"], float).reshape(data["n_states"], data["n_actions"]))
