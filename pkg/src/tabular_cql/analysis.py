"""Checks of the conservative-evaluation guarantees on concrete instances."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .datasets import ConcentrationConfig, EmpiricalModel
from .errors import ShapeError, SupportError
from .evaluation import CqlEvalConfig, cql_fixed_point, d_cql
from .learning import CqlLearnConfig, LearnState, cql_learn_step
from .mdp import (Policy, TabularMdp, bellman_policy_op, discounted_state_marginal, expected_q,
                  return_j, soft_policy_from_q, total_variation)

VACUOUS_TOL = 1e-9
STRICT_TOL = 1e-12


# ---------------------------------------------------------------------------
# gap expansion

@dataclass
class GapReport:
    """Per-state comparison of E_{pi_beta}[Q] - E_mu[Q] for the penalized and
    plain next iterates.  ``holds`` requires lhs - rhs > 1e-12 at every
    non-vacuous state; a state is vacuous when mu equals pi_beta there."""

    lhs: np.ndarray
    rhs: np.ndarray
    delta_hat: np.ndarray
    alpha_required: float
    alpha_required_per_state: np.ndarray
    vacuous: np.ndarray
    holds: bool

    @property
    def margin(self) -> np.ndarray:
        return self.lhs - self.rhs


def _penalty_ratio(mu: np.ndarray, beta: np.ndarray) -> np.ndarray:
    if np.any((mu > 0) & (beta <= 0)):
        raise SupportError("mu puts mass where pi_beta has none")
    return np.divide(mu - beta, beta, out=np.zeros_like(beta), where=beta > 0)


def gap_expanding_check(mdp: TabularMdp, behavior: Policy, q_hat_k, q_k, mu_k: Policy,
                        alpha_k: float, backup_policy: Policy | None = None) -> GapReport:
    """Compare the data-versus-mu value gap of the penalized and plain updates.

    Q_hat_{k+1} = B Q_hat_k - alpha_k (mu_k - pi_beta) / pi_beta and Q_{k+1} = B Q_k,
    both with the backup policy (``mu_k`` by default).  Since the reward
    cancels, lhs - rhs = alpha_k * delta_hat - (mu_k - pi_beta)^T B(Q_hat_k - Q_k)
    with delta_hat = sum_a mu_k (mu_k - pi_beta) / pi_beta, so the required alpha
    at each state is (mu_k - pi_beta)^T [B Q_hat_k - B Q_k] / delta_hat.
    """
    pol = mu_k if backup_policy is None else backup_policy
    beta, mu = behavior.probs, mu_k.probs
    if beta.shape != mdp.shape or mu.shape != mdp.shape:
        raise ShapeError("policies do not match the MDP")
    ratio = _penalty_ratio(mu, beta)
    b_hat = bellman_policy_op(mdp, pol, q_hat_k)
    b = bellman_policy_op(mdp, pol, q_k)
    q_hat_next = b_hat - alpha_k * ratio
    lhs = ((beta - mu) * q_hat_next).sum(axis=1)
    rhs = ((beta - mu) * b).sum(axis=1)
    delta_hat = (mu * ratio).sum(axis=1)
    vacuous = delta_hat < VACUOUS_TOL
    num = ((mu - beta) * (b_hat - b)).sum(axis=1)
    per_state = np.where(vacuous, 0.0,
                         np.maximum(num / np.where(vacuous, 1.0, delta_hat), 0.0))
    required = float(per_state.max()) if per_state.size else 0.0
    margin = lhs - rhs
    holds = bool(np.all(margin[~vacuous] > STRICT_TOL))
    return GapReport(lhs, rhs, delta_hat, required, per_state, vacuous, holds)


def worst_case_alpha(mdp: TabularMdp, behavior: Policy, q_hat_k, mu_k: Policy,
                     backup_policy: Policy | None = None) -> float:
    """Gap-expansion alpha that does not need the true iterate Q_k.

    Replaces -(mu - pi_beta)^T B Q_k by its worst case over
    |B Q_k| <= r_max / (1 - gamma), which is D_TV(mu, pi_beta) times the
    range 2 r_max / (1 - gamma).
    """
    pol = mu_k if backup_policy is None else backup_policy
    beta, mu = behavior.probs, mu_k.probs
    ratio = _penalty_ratio(mu, beta)
    delta_hat = (mu * ratio).sum(axis=1)
    vacuous = delta_hat < VACUOUS_TOL
    tv = total_variation(mu_k, behavior)
    num = ((mu - beta) * bellman_policy_op(mdp, pol, q_hat_k)).sum(axis=1)
    num = num + tv * 2.0 * mdp.r_max / (1.0 - mdp.gamma)
    per_state = np.where(vacuous, 0.0,
                         np.maximum(num / np.where(vacuous, 1.0, delta_hat), 0.0))
    return float(per_state.max())


# ---------------------------------------------------------------------------
# penalized objective equivalence

def simplex_grid(n_actions: int, step: float) -> np.ndarray:
    """All distributions over ``n_actions`` with entries on a ``step`` lattice."""
    m = int(round(1.0 / step))
    if not np.isclose(m * step, 1.0):
        raise ValueError("step must divide 1")
    rows = [c for c in itertools.product(range(m + 1), repeat=n_actions - 1) if sum(c) <= m]
    return np.array([list(c) + [m - sum(c)] for c in rows], dtype=np.float64) / m


@dataclass
class EquivalenceReport:
    argmax_lhs: Policy
    argmax_rhs: Policy
    match: bool
    max_abs_diff: float
    ambiguous: bool
    lhs: np.ndarray
    rhs: np.ndarray


def penalized_value(mdp_hat: TabularMdp, pi: Policy, pi_beta_hat: Policy, alpha: float,
                    rho0=None) -> float:
    """E_rho[V_hat^pi] from the exact penalized fixed point in mdp_hat with mu = pi."""
    rho0 = mdp_hat.initial_dist if rho0 is None else np.asarray(rho0, float)
    cfg = CqlEvalConfig(alpha, pi, "eq2", "exact")
    q_hat = cql_fixed_point(cfg, mdp_hat, pi, pi_beta_hat)
    return float(rho0 @ expected_q(pi, q_hat))


def penalized_return(mdp_hat: TabularMdp, pi: Policy, pi_beta_hat: Policy, alpha: float,
                     rho0=None) -> float:
    """J(pi, mdp_hat) - alpha / (1 - gamma) * E_{d^pi}[d_cql(pi, pi_beta_hat)]."""
    m = mdp_hat if rho0 is None else mdp_hat.with_initial_dist(rho0)
    d = discounted_state_marginal(m, pi)
    return return_j(m, pi) - alpha / (1.0 - m.gamma) * float(d @ d_cql(pi, pi_beta_hat))


def altered_reward_value(mdp_hat: TabularMdp, pi: Policy, pi_beta_hat: Policy,
                         alpha: float, rho0=None) -> float:
    """J(pi) in mdp_hat with reward r - alpha (pi / pi_beta_hat - 1)."""
    m = mdp_hat if rho0 is None else mdp_hat.with_initial_dist(rho0)
    beta = pi_beta_hat.probs
    if np.any((pi.probs > 0) & (beta <= 0)):
        raise SupportError("pi puts mass where pi_beta_hat has none")
    shift = np.divide(pi.probs, beta, out=np.zeros_like(beta), where=beta > 0) - 1.0
    reward = m.reward - alpha * np.where(beta > 0, shift, 0.0)
    bound = max(m.r_max, float(np.abs(reward).max()))
    altered = TabularMdp(m.transition, reward, m.gamma, m.initial_dist, bound, m.name)
    return return_j(altered, pi)


def objective_equivalence_check(mdp_hat: TabularMdp, pi_beta_hat: Policy, alpha: float,
                                rho0=None, policy_grid_resolution: float = 0.05,
                                tol: float = 1e-8) -> EquivalenceReport:
    """Evaluate both objectives on every grid policy and compare."""
    n_s, n_a = mdp_hat.shape
    if n_s > 3:
        raise ValueError("the policy grid is only tractable for at most 3 states")
    rows = simplex_grid(n_a, policy_grid_resolution)
    beta = pi_beta_hat.probs
    policies = []
    lhs, rhs = [], []
    for combo in itertools.product(range(len(rows)), repeat=n_s):
        probs = rows[list(combo)]
        if np.any((probs > 0) & (beta <= 0)):
            continue
        pi = Policy(probs)
        policies.append(pi)
        lhs.append(penalized_value(mdp_hat, pi, pi_beta_hat, alpha, rho0))
        rhs.append(penalized_return(mdp_hat, pi, pi_beta_hat, alpha, rho0))
    lhs = np.array(lhs)
    rhs = np.array(rhs)
    i, j = int(np.argmax(lhs)), int(np.argmax(rhs))
    top = np.sort(lhs)[-2:] if lhs.size > 1 else lhs
    ambiguous = bool(lhs.size > 1 and top[1] - top[0] < tol)
    diff = float(np.max(np.abs(lhs - rhs)))
    match = i == j or abs(lhs[i] - lhs[j]) <= tol
    return EquivalenceReport(policies[i], policies[j], bool(match), diff, ambiguous, lhs, rhs)


# ---------------------------------------------------------------------------
# safe policy improvement

@dataclass
class SafeImprovementReport:
    zeta: float
    j_pi_star_m: float
    j_beta_m: float
    j_pi_star_m_hat: float
    j_beta_m_hat: float
    sampling_term: float
    improvement_term: float
    lemma_bound_pi_star: float
    lemma_bound_beta: float
    lemma_holds_pi_star: bool
    lemma_holds_beta: bool
    used_sentinel: bool
    holds: bool

    def to_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                for k, v in self.__dict__.items()}


def sampling_error_bound(model: EmpiricalModel, mdp_hat: TabularMdp, pi: Policy,
                         cfg: ConcentrationConfig) -> tuple[float, bool]:
    """(c_r/(1-g) + g r_max c_t/(1-g)^2) E_{d^pi in mdp_hat}[sqrt(|A| / |D(s)|) sqrt(d_cql + 1)].

    Unvisited states use the zero-count sentinel for 1/sqrt(|D(s)|); the
    second return value says whether that happened with positive weight.
    """
    g = model.gamma
    scale = cfg.c_r / (1 - g) + g * model.r_max * cfg.c_t / (1 - g) ** 2
    d = discounted_state_marginal(mdp_hat, pi)
    n = model.state_counts
    inv_root = np.where(n > 0, 1.0 / np.sqrt(np.maximum(n, 1)), model.sentinel)
    # d_cql is undefined at unvisited states (pi_beta_hat is a placeholder
    # there); only the visited part of the support is checked
    vis = model.visited_states
    beta = model.pi_beta_hat.probs
    if np.any((pi.probs > 0) & (beta <= 0) & vis[:, None]):
        raise SupportError("pi puts mass on actions absent from the data")
    div = d_cql(Policy(np.where(vis[:, None], pi.probs, beta)), model.pi_beta_hat)
    term = np.sqrt(model.n_actions) * inv_root * np.sqrt(div + 1.0)
    used = bool(np.any((d > 0) & ~vis))
    return float(scale * (d @ term)), used


def zeta_bound(mdp: TabularMdp, model: EmpiricalModel, pi_star: Policy,
               cfg: ConcentrationConfig, alpha: float | None = None) -> SafeImprovementReport:
    """Safe-improvement margin zeta and whether J(pi*, M) >= J(pi_beta_hat, M) - zeta.

    ``alpha`` is accepted for reporting symmetry; zeta uses the realized
    empirical improvement J(pi*, M_hat) - J(pi_beta_hat, M_hat), which the
    penalized objective bounds below by alpha / (1 - gamma) E[d_cql].
    """
    mdp_hat = model.to_mdp(mdp.initial_dist)
    beta = model.pi_beta_hat
    bound_star, used_star = sampling_error_bound(model, mdp_hat, pi_star, cfg)
    bound_beta, used_beta = sampling_error_bound(model, mdp_hat, beta, cfg)
    j_star_hat = return_j(mdp_hat, pi_star)
    j_beta_hat = return_j(mdp_hat, beta)
    j_star = return_j(mdp, pi_star)
    j_beta = return_j(mdp, beta)
    sampling = 2.0 * bound_star
    improvement = j_star_hat - j_beta_hat
    zeta = sampling - improvement
    return SafeImprovementReport(
        zeta=zeta, j_pi_star_m=j_star, j_beta_m=j_beta, j_pi_star_m_hat=j_star_hat,
        j_beta_m_hat=j_beta_hat, sampling_term=sampling, improvement_term=improvement,
        lemma_bound_pi_star=bound_star, lemma_bound_beta=bound_beta,
        lemma_holds_pi_star=abs(j_star_hat - j_star) <= bound_star + 1e-9,
        lemma_holds_beta=abs(j_beta_hat - j_beta) <= bound_beta + 1e-9,
        used_sentinel=used_star or used_beta,
        holds=j_star >= j_beta - zeta - 1e-9)


# ---------------------------------------------------------------------------
# the data-side maximization is necessary

@dataclass
class NecessityResult:
    min_penalty: np.ndarray
    witness_pi: Policy


def nu_penalty(pi: Policy, nu: Policy, pi_beta_hat: Policy) -> np.ndarray:
    """Per-state sum_a pi (pi - nu) / pi_beta_hat."""
    return (pi.probs * (pi.probs - nu.probs) / pi_beta_hat.probs).sum(axis=1)


def nu_necessity_search(pi_beta_hat: Policy, nu: Policy) -> NecessityResult:
    """Minimize the per-state penalty over pi; the minimizer is (nu + pi_beta_hat) / 2.

    The minimum equals -chi^2(nu || pi_beta_hat) / 4, so it is zero only when
    nu = pi_beta_hat.
    """
    if pi_beta_hat.shape != nu.shape:
        raise ShapeError("policy shapes differ")
    if np.any(pi_beta_hat.probs <= 0):
        raise SupportError("pi_beta_hat must be strictly positive")
    witness = Policy(0.5 * nu.probs + 0.5 * pi_beta_hat.probs)
    return NecessityResult(nu_penalty(witness, nu, pi_beta_hat), witness)


# ---------------------------------------------------------------------------
# lower-bounded values under a slowly changing policy

@dataclass
class LowerBoundStep:
    condition: np.ndarray
    v_hat: np.ndarray
    v: np.ndarray
    epsilon: np.ndarray

    @property
    def implication_holds(self) -> bool:
        ok = self.v_hat <= self.v + 1e-9
        return bool(np.all(ok | ~self.condition))

    @property
    def vacuous(self) -> bool:
        return not bool(self.condition.any())


def lower_bounded_values_check(config: CqlLearnConfig, source, q_k, policy_k: Policy,
                               policy_next: Policy, alpha: float,
                               pi_beta: Policy | None = None) -> LowerBoundStep:
    """Check one learning step of the entropy-regularized critic.

    With pi_Q = softmax(Q_k) and eps(s) the measured total variation between
    the next policy and pi_Q, the per-state condition is
    E_{pi_Q}[pi_Q / pi_beta - 1] >= max_a (pi_Q / pi_beta) * eps.  Where it holds
    the next policy's value under the penalized critic should not exceed its
    value under the unpenalized critic built from the same Q_k.
    """
    if config.regularizer != "H":
        raise ValueError("the check applies to the entropy regularizer")
    beta = (source.pi_beta_hat if isinstance(source, EmpiricalModel) else pi_beta)
    if np.any(beta.probs <= 0):
        raise SupportError("the check needs a behavior policy with full support")
    state = LearnState(np.asarray(q_k, float), policy_k, alpha)
    q_hat = cql_learn_step(config, source, state, pi_beta).q
    q_plain = cql_learn_step(config, source, replace(state, alpha=0.0), pi_beta).q
    pi_q = soft_policy_from_q(q_k)
    eps = total_variation(policy_next, pi_q)
    lhs = d_cql(pi_q, beta)
    rhs = (pi_q.probs / beta.probs).max(axis=1) * eps
    return LowerBoundStep(lhs >= rhs, expected_q(policy_next, q_hat),
                          expected_q(policy_next, q_plain), eps)
