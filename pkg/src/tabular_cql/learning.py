"""Offline policy learning with a conservative critic.

Each iteration solves the tabular critic update in closed form, then moves
the policy toward the softmax (or argmax) of the new critic.  The critic
minimizes

    alpha * R(Q) + 1/2 * E_{s~D, a~pi_beta}[(Q - B Q_k)^2]

whose stationary point is ``Q = B Q_k - alpha * grad R / (w(s) pi_beta(a|s))``.
For the entropy and KL regularizers the gradient is ``w(s) (mu - pi_beta)``
with ``mu`` the inner maximizer, giving the familiar
``B Q_k - alpha * (mu - pi_beta) / pi_beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .datasets import EmpiricalModel, empirical_bellman_op, empirical_optimality_op
from .errors import ShapeError
from .mdp import (Policy, TabularMdp, bellman_optimality_op, bellman_policy_op,
                  discounted_state_marginal, expected_q, return_j, soft_policy_from_q,
                  total_variation)

REGULARIZERS = ("H", "rho", "var")
PRIORS = ("uniform", "previous", "behavior")
P_HATS = ("uniform", "inverse_counts")


@dataclass(frozen=True)
class CqlLearnConfig:
    """Learning configuration.

    ``prior`` and ``reg_temperature`` apply to the ``rho`` regularizer
    (``reg_temperature=inf`` makes mu equal the prior).  ``p_hat`` and
    ``robust_delta`` apply to ``var``.  With ``lagrange=True`` alpha starts at
    ``alpha`` and follows projected dual ascent toward the budget ``tau``.
    ``critic_step`` below 1 relaxes the critic toward its closed-form target,
    Q_{k+1} = Q_k + critic_step * (target - Q_k); with the entropy penalty
    evaluated at Q_k the undamped update can settle into a period-two cycle.
    """

    regularizer: str = "H"
    prior: str = "uniform"
    reg_temperature: float = 1.0
    p_hat: str = "uniform"
    robust_delta: float = 0.1
    alpha: float = 1.0
    lagrange: bool = False
    tau: float = 1.0
    dual_step: float = 0.1
    backup: str = "policy"
    actor: str = "soft"
    temperature: float = 1.0
    iters: int = 100
    policy_step: float = 1.0
    critic_step: float = 1.0
    support_only: bool = True
    clamp: bool = False

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}")
        if self.p_hat not in P_HATS:
            raise ValueError(f"p_hat must be one of {P_HATS}")
        if self.backup not in ("policy", "optimality"):
            raise ValueError("backup must be 'policy' or 'optimality'")
        if self.actor not in ("soft", "greedy"):
            raise ValueError("actor must be 'soft' or 'greedy'")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and nonnegative")
        if self.lagrange and not self.tau > 0:
            raise ValueError("tau must be positive in Lagrange mode")
        if self.lagrange and not self.dual_step > 0:
            raise ValueError("dual_step must be positive in Lagrange mode")
        if not self.temperature > 0 or not self.reg_temperature > 0:
            raise ValueError("temperatures must be positive")
        if not self.robust_delta > 0:
            raise ValueError("robust_delta must be positive")
        if not 0 < self.policy_step <= 1:
            raise ValueError("policy_step must lie in (0, 1]")
        if not 0 < self.critic_step <= 1:
            raise ValueError("critic_step must lie in (0, 1]")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")


@dataclass(frozen=True)
class _Problem:
    """The pieces of a learning problem that do not change across iterations."""

    source: object
    pi_beta: np.ndarray
    support: np.ndarray
    weights: np.ndarray
    state_counts: np.ndarray | None
    gamma: float
    r_max: float

    @property
    def floor(self) -> float:
        return -2.0 * self.r_max / (1.0 - self.gamma)


def _problem(source, pi_beta: Policy | None) -> _Problem:
    if isinstance(source, EmpiricalModel):
        return _Problem(source, source.pi_beta_hat.probs, source.visited_pairs,
                        source.state_freq, source.state_counts, source.gamma, source.r_max)
    if isinstance(source, TabularMdp):
        if pi_beta is None:
            raise ValueError("learning on a known MDP needs the behavior policy")
        if pi_beta.shape != source.shape:
            raise ShapeError("pi_beta does not match the MDP")
        w = discounted_state_marginal(source, pi_beta)
        return _Problem(source, pi_beta.probs, pi_beta.probs > 0, w, None,
                        source.gamma, source.r_max)
    raise TypeError("source must be a TabularMdp or an EmpiricalModel")


def _prior(config: CqlLearnConfig, prob: _Problem, prev_policy: Policy | None) -> np.ndarray:
    if config.prior == "uniform":
        n_a = prob.pi_beta.shape[1]
        return np.full(prob.pi_beta.shape, 1.0 / n_a)
    if config.prior == "behavior":
        return prob.pi_beta
    if prev_policy is None:
        raise ValueError("the 'previous' prior needs the previous policy")
    return prev_policy.probs


def _p_hat(config: CqlLearnConfig, prob: _Problem) -> np.ndarray:
    shape = prob.pi_beta.shape
    if config.p_hat == "uniform":
        return np.full(shape, 1.0 / shape[1])
    counts = prob.pi_beta * (prob.state_counts[:, None] if prob.state_counts is not None else 1.0)
    inv = np.divide(1.0, counts, out=np.zeros(shape), where=prob.support)
    tot = inv.sum(axis=1, keepdims=True)
    uniform = np.full(shape, 1.0 / shape[1])
    return np.where(tot > 0, inv / np.where(tot > 0, tot, 1.0), uniform)


def mu_from_regularizer(config: CqlLearnConfig, q, prev_policy: Policy | None = None,
                        source=None, pi_beta: Policy | None = None) -> Policy:
    """Inner maximizer over mu for the configured regularizer.

    ``H``: softmax(Q).  ``rho``: prior * exp(Q / reg_temperature), normalized.
    ``var``: the fixed sampling distribution P_hat.
    """
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q must be finite")
    if config.regularizer == "H":
        return soft_policy_from_q(q, 1.0)
    prob = _problem(source, pi_beta) if source is not None else None
    if config.regularizer == "rho":
        if config.prior == "uniform":
            rho = np.full(q.shape, 1.0 / q.shape[1])
        elif config.prior == "behavior":
            if prob is None:
                raise ValueError("the 'behavior' prior needs a source")
            rho = prob.pi_beta
        else:
            if prev_policy is None:
                raise ValueError("the 'previous' prior needs the previous policy")
            rho = prev_policy.probs
        mass = rho.sum(axis=1)
        if np.any(mass <= 0):
            raise ValueError("prior has zero mass at some state")
        if math.isinf(config.reg_temperature):
            return Policy.from_unnormalized(rho)
        z = q / config.reg_temperature
        z = z - np.where(rho > 0, z, -np.inf).max(axis=1, keepdims=True)
        w = np.where(rho > 0, rho * np.exp(z), 0.0)
        return Policy.from_unnormalized(w)
    if prob is None:
        raise ValueError("the 'var' regularizer needs an empirical model")
    return Policy(_p_hat(config, prob))


def _var_terms(config: CqlLearnConfig, prob: _Problem, q: np.ndarray):
    """Per-state variance, robust scale and P_hat for the variance regularizer."""
    p = _p_hat(config, prob)
    mean = (p * q).sum(axis=1)
    var = (p * (q - mean[:, None]) ** 2).sum(axis=1)
    n = np.maximum(prob.state_counts, 1)
    scale = 2.0 * config.robust_delta / n
    return p, mean, var, scale


def _penalty_gradient(config: CqlLearnConfig, prob: _Problem, q: np.ndarray,
                      prev_policy: Policy | None) -> np.ndarray:
    """Per-state regularizer gradient divided by the state weight: mu - pi_beta
    for H and rho, the linearized variance gradient for var."""
    if config.regularizer != "var":
        mu = mu_from_regularizer(config, q, prev_policy, prob.source,
                                 None if isinstance(prob.source, EmpiricalModel)
                                 else Policy(prob.pi_beta)).probs
        return mu - prob.pi_beta
    if prob.state_counts is None:
        raise ValueError("the 'var' regularizer needs an empirical model")
    p, mean, var, scale = _var_terms(config, prob, q)
    root = np.sqrt(scale * var)
    dvar = np.divide(scale[:, None] * p * (q - mean[:, None]), root[:, None],
                     out=np.zeros_like(q), where=root[:, None] > 0)
    return dvar + p - prob.pi_beta


def cql_objective_value(config: CqlLearnConfig, q, source, pi_beta: Policy | None = None,
                        prev_policy: Policy | None = None) -> float:
    """State-weighted regularizer value (the gap that Lagrange mode tracks).

    ``H``: sum_s w(s) [logsumexp_a Q - E_{pi_beta} Q].
    ``rho``: sum_s w(s) [T log sum_a prior exp(Q / T) - E_{pi_beta} Q].
    ``var``: sum_s w(s) [sqrt(2 delta var_P_hat(Q) / n(s)) + E_P_hat Q - E_{pi_beta} Q].
    """
    prob = _problem(source, pi_beta)
    q = np.asarray(q, dtype=np.float64)
    data_term = (prob.pi_beta * q).sum(axis=1)
    if config.regularizer == "H":
        soft = logsumexp(q, axis=1)
    elif config.regularizer == "rho":
        rho = _prior(config, prob, prev_policy)
        if math.isinf(config.reg_temperature):
            soft = (rho * q).sum(axis=1)
        else:
            t = config.reg_temperature
            soft = t * logsumexp(q / t, axis=1, b=rho)
    else:
        if prob.state_counts is None:
            raise ValueError("the 'var' regularizer needs an empirical model")
        _, mean, var, scale = _var_terms(config, prob, q)
        soft = np.sqrt(scale * var) + mean
    return float(prob.weights @ (soft - data_term))


def lagrange_alpha_update(alpha: float, gap: float, tau: float, dual_step: float) -> float:
    """Projected dual ascent: max(0, alpha + dual_step * (gap - tau))."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return max(0.0, alpha + dual_step * (gap - tau))


@dataclass(frozen=True)
class LearnState:
    q: np.ndarray
    policy: Policy
    alpha: float


def _critic(config: CqlLearnConfig, prob: _Problem, state: LearnState) -> np.ndarray:
    src = prob.source
    if config.backup == "policy":
        if isinstance(src, EmpiricalModel):
            target = empirical_bellman_op(src, state.policy, state.q)
        else:
            target = bellman_policy_op(src, state.policy, state.q)
    else:
        if isinstance(src, EmpiricalModel):
            target = empirical_optimality_op(src, state.q)
        else:
            target = bellman_optimality_op(src, state.q)
    grad = _penalty_gradient(config, prob, state.q, state.policy)
    pen = np.divide(grad, prob.pi_beta, out=np.zeros_like(grad), where=prob.support)
    q = np.where(prob.support, target - state.alpha * pen, prob.floor)
    if config.critic_step < 1.0:
        q = state.q + config.critic_step * (q - state.q)
    if config.clamp:
        b = -prob.floor
        q = np.clip(q, -b, b)
    return q


def _actor(config: CqlLearnConfig, prob: _Problem, q: np.ndarray, prev: Policy) -> Policy:
    if config.support_only:
        # actions outside the data support are never chosen at visited states
        allowed = prob.support | ~prob.support.any(axis=1, keepdims=True)
        masked = np.where(allowed, q, -np.inf)
    else:
        masked = q
    if config.actor == "greedy":
        return Policy.greedy(masked)
    z = masked / config.temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    soft = Policy(e / e.sum(axis=1, keepdims=True))
    return Policy.mixture(prev, soft, config.policy_step)


def cql_learn_step(config: CqlLearnConfig, source, state: LearnState,
                   pi_beta: Policy | None = None) -> LearnState:
    """One critic solve and one policy update.  Alpha is carried unchanged;
    run_cql applies the dual update."""
    prob = _problem(source, pi_beta)
    return _step(config, prob, state)


def _step(config: CqlLearnConfig, prob: _Problem, state: LearnState) -> LearnState:
    q = _critic(config, prob, state)
    return LearnState(q, _actor(config, prob, q, state.policy), state.alpha)


@dataclass
class LearnTrace:
    k: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    dtv: list = field(default_factory=list)
    j_hat_m: list = field(default_factory=list)
    j_m: list = field(default_factory=list)
    iterates: list = field(default_factory=list)

    COLUMNS = ("k", "alpha", "gap", "dtv", "J_hat_M", "J_M")

    def __len__(self) -> int:
        return len(self.k)

    def rows(self):
        for i in range(len(self.k)):
            yield (self.k[i], self.alpha[i], self.gap[i], self.dtv[i],
                   self.j_hat_m[i], self.j_m[i])

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for row in self.rows():
            lines.append(",".join("" if v is None else repr(v) for v in row))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LearnResult:
    policy: Policy
    q: np.ndarray
    trace: LearnTrace
    alpha: float


def run_cql(config: CqlLearnConfig, source, pi_beta: Policy | None = None,
            true_mdp: TabularMdp | None = None, q0=None, policy0: Policy | None = None,
            keep_iterates: bool = False) -> LearnResult:
    """Run ``config.iters`` learning steps from Q = 0 and a uniform policy
    (restricted to observed actions when ``support_only``).

    Trace entry k records the alpha used at step k, the regularizer gap of the
    new critic, the largest per-state total variation between the new policy
    and softmax of the old critic, the critic's estimate of the return of the
    new policy and its true return, scored in ``true_mdp`` or in ``source`` when
    that is an MDP.
    ``keep_iterates`` stores (Q_k, Q_{k+1}, pi_k, pi_{k+1}, alpha_k) tuples.
    """
    prob = _problem(source, pi_beta)
    shape = prob.pi_beta.shape
    q = np.zeros(shape) if q0 is None else np.array(q0, dtype=np.float64)
    if policy0 is None:
        # uniform over observed actions so the mixture actor never leaves the data support
        allowed = prob.support | ~prob.support.any(axis=1, keepdims=True)
        policy0 = (Policy.from_unnormalized(allowed.astype(float)) if config.support_only
                   else Policy.uniform(*shape))
    policy = policy0
    state = LearnState(q, policy, float(config.alpha))
    scoring = true_mdp if true_mdp is not None else (
        source if isinstance(source, TabularMdp) else None)
    rho0 = scoring.initial_dist if scoring is not None else prob.weights
    trace = LearnTrace()
    for k in range(config.iters):
        new = _step(config, prob, state)
        gap = cql_objective_value(config, new.q, source, pi_beta, state.policy)
        trace.k.append(k)
        trace.alpha.append(state.alpha)
        trace.gap.append(gap)
        trace.dtv.append(float(total_variation(new.policy, soft_policy_from_q(state.q)).max()))
        trace.j_hat_m.append(float(rho0 @ expected_q(new.policy, new.q)))
        trace.j_m.append(return_j(scoring, new.policy) if scoring is not None else None)
        if keep_iterates:
            trace.iterates.append((state.q, new.q, state.policy, new.policy, state.alpha))
        alpha = state.alpha
        if config.lagrange:
            alpha = lagrange_alpha_update(state.alpha, gap, config.tau, config.dual_step)
        state = LearnState(new.q, new.policy, alpha)
    return LearnResult(state.policy, state.q, trace, state.alpha)
