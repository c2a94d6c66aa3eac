"""Conservative policy evaluation in the tabular setting.

Two penalized backups are provided.  ``eq1`` pushes Q down by
``alpha * mu / pi_beta`` everywhere; ``eq2`` also pushes Q up under the
data distribution, for a net ``alpha * (mu / pi_beta - 1)``.  Both are
closed-form minimizers of a penalized squared Bellman error, so each
iterate is a plain backup minus an iterate-independent penalty and the
fixed point solves an affine system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .datasets import ConcentrationConfig, EmpiricalModel, empirical_bellman_op, overestimation_bound
from .errors import ConvergenceError, ShapeError, SupportError
from .mdp import (Policy, TabularMdp, bellman_policy_op, expected_q, policy_value,
                  solve_policy_affine, state_transition_matrix)

log = logging.getLogger(__name__)

VARIANTS = ("eq1", "eq2")
BACKUPS = ("exact", "empirical")


@dataclass(frozen=True)
class CqlEvalConfig:
    alpha: float
    mu: Policy
    variant: str = "eq2"
    backup: str = "exact"
    max_iters: int = 100_000
    tol: float = 1e-10
    counts_weighted_alpha: bool = False
    clamp: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be a finite nonnegative number, got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.backup not in BACKUPS:
            raise ValueError(f"backup must be one of {BACKUPS}, got {self.backup!r}")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("max_iters must be positive and tol must be positive")


def _resolve(config: CqlEvalConfig, source, pi_beta: Policy | None):
    """Return (behavior policy, penalty support mask, counts or None)."""
    if config.backup == "exact":
        if not isinstance(source, TabularMdp):
            raise TypeError("the exact backup needs a TabularMdp")
        if pi_beta is None:
            raise ValueError("the exact backup needs the behavior policy pi_beta")
        if config.counts_weighted_alpha:
            raise ValueError("counts-weighted alpha needs an empirical model")
        if pi_beta.shape != source.shape:
            raise ShapeError("pi_beta does not match the MDP")
        return pi_beta.probs, pi_beta.probs > 0, None
    if not isinstance(source, EmpiricalModel):
        raise TypeError("the empirical backup needs an EmpiricalModel")
    return source.pi_beta_hat.probs, source.visited_pairs, source.counts


def penalty(config: CqlEvalConfig, source, pi_beta: Policy | None = None) -> np.ndarray:
    """Per-pair amount subtracted from the backup at every iterate."""
    beta, support, counts = _resolve(config, source, pi_beta)
    mu = config.mu.probs
    if mu.shape != beta.shape:
        raise ShapeError("mu does not match the model")
    # states where the penalty applies: all states for the exact backup,
    # visited states for the empirical one
    active = support.any(axis=1, keepdims=True)
    bad = (mu > 0) & ~support & active
    if np.any(bad):
        s, a = map(int, np.argwhere(bad)[0])
        raise SupportError(f"mu puts mass on ({s}, {a}) where the behavior policy has none")
    if counts is not None and config.counts_weighted_alpha:
        nu = 0.0 if config.variant == "eq1" else beta
        pen = (mu - nu) / np.maximum(counts, 1)
    else:
        ratio = np.divide(mu, beta, out=np.zeros_like(mu), where=support)
        pen = ratio if config.variant == "eq1" else ratio - 1.0
    return config.alpha * np.where(support, pen, 0.0)


def _backup(config: CqlEvalConfig, source, target_policy: Policy, q) -> np.ndarray:
    if config.backup == "exact":
        return bellman_policy_op(source, target_policy, q)
    return empirical_bellman_op(source, target_policy, q)


def _iterate(config: CqlEvalConfig, variant: str, source, target_policy: Policy, q,
             pi_beta: Policy | None) -> np.ndarray:
    if config.variant != variant:
        raise ValueError(f"config.variant is {config.variant!r}, expected {variant!r}")
    out = _backup(config, source, target_policy, q) - penalty(config, source, pi_beta)
    if config.clamp:
        b = 2.0 * source.r_max / (1.0 - source.gamma)
        out = np.clip(out, -b, b)
    return out


def cql_eq1_iterate(config: CqlEvalConfig, source, target_policy: Policy, q,
                    pi_beta: Policy | None = None) -> np.ndarray:
    """One step of Q <- B^pi Q - alpha * mu / pi_beta."""
    return _iterate(config, "eq1", source, target_policy, q, pi_beta)


def cql_eq2_iterate(config: CqlEvalConfig, source, target_policy: Policy, q,
                    pi_beta: Policy | None = None) -> np.ndarray:
    """One step of Q <- B^pi Q - alpha * (mu / pi_beta - 1)."""
    return _iterate(config, "eq2", source, target_policy, q, pi_beta)


def cql_fixed_point(config: CqlEvalConfig, source, target_policy: Policy,
                    pi_beta: Policy | None = None) -> np.ndarray:
    """Fixed point of the configured penalized backup.

    The exact backup without clamping is solved directly.  Otherwise the
    backup is iterated from zero until the sup-norm change drops below
    ``config.tol``.
    """
    pen = penalty(config, source, pi_beta)
    if target_policy.shape != pen.shape:
        raise ShapeError("target policy does not match the model")
    if config.backup == "exact" and not config.clamp:
        return solve_policy_affine(source, target_policy, source.reward - pen, method="direct")
    if config.backup == "exact":
        c, trans = source.reward - pen, source.transition
    else:
        c = np.where(source.visited_pairs, source.r_hat - pen, source.floor)
        trans = source.t_hat
    bound = 2.0 * source.r_max / (1.0 - source.gamma) if config.clamp else np.inf
    q, iters, residual = _kernels.affine_fixed_point(
        np.ascontiguousarray(c), np.ascontiguousarray(trans),
        np.ascontiguousarray(target_policy.probs), source.gamma, config.tol,
        config.max_iters, -bound, bound, np.zeros(pen.shape))
    if residual > config.tol:
        raise ConvergenceError(
            f"fixed point not reached: residual {residual:.3g} after {iters} sweeps",
            iters, residual)
    return q


def d_cql(pi: Policy, pi_beta: Policy) -> np.ndarray:
    """Per-state sum_a pi * (pi / pi_beta - 1), a chi-square divergence.

    Evaluated as sum_a (pi - pi_beta)^2 / pi_beta over the support of
    pi_beta, which is algebraically identical and never rounds below zero.
    """
    p, b = pi.probs, pi_beta.probs
    if p.shape != b.shape:
        raise ShapeError("policy shapes differ")
    if np.any((p > 0) & (b <= 0)):
        raise SupportError("pi puts mass where pi_beta has none")
    sq = np.divide((p - b) ** 2, b, out=np.zeros_like(p), where=b > 0)
    return sq.sum(axis=1)


def alpha_threshold_eq1(model: EmpiricalModel, cfg: ConcentrationConfig, mu: Policy,
                        gamma: float | None = None, r_max: float | None = None) -> float:
    """Smallest alpha for which the penalty dominates the sampling error at every pair.

    Computed as max over visited pairs of the overestimation bound, times the
    reciprocal of the smallest mu / pi_beta_hat ratio over visited pairs.
    Returns +inf (with a logged diagnostic) when mu vanishes at a visited pair
    and the bound is positive.
    """
    vis = model.visited_pairs
    if not vis.any():
        raise ValueError("model has no visited pairs")
    bound = overestimation_bound(model, cfg, gamma, r_max)[vis].max()
    if bound == 0.0:
        return 0.0
    ratio = (mu.probs / model.pi_beta_hat.probs)[vis]
    if ratio.min() <= 0.0:
        log.warning("mu is zero at a visited pair; no finite alpha bounds that pair")
        return float("inf")
    return float(bound / ratio.min())


def alpha_threshold_eq2(model: EmpiricalModel, cfg: ConcentrationConfig, target_policy: Policy,
                        gamma: float | None = None, r_max: float | None = None) -> float:
    """Threshold for the value lower bound of the ``eq2`` estimate.

    Uses state counts: max over visited states of C / sqrt(n(s)) times the max
    over visited states of 1 / d_cql(pi, pi_beta_hat)(s), where C is the
    combined concentration constant.  Returns +inf (with a logged diagnostic)
    when d_cql vanishes at a visited state.
    """
    gamma = model.gamma if gamma is None else gamma
    r_max = model.r_max if r_max is None else r_max
    vis = model.visited_states
    if not vis.any():
        raise ValueError("model has no visited states")
    c = cfg.combined(gamma, r_max)
    if c == 0.0:
        return 0.0
    sampling = (c / np.sqrt(model.state_counts[vis])).max()
    div = d_cql(target_policy, model.pi_beta_hat)[vis]
    if div.min() <= 1e-15:
        log.warning("pi equals pi_beta_hat at a visited state; the threshold is unbounded")
        return float("inf")
    return float(sampling / div.min())


@dataclass
class EvalReport:
    variant: str
    alpha: float
    v_hat: np.ndarray
    v: np.ndarray
    threshold: float
    gap: np.ndarray = field(init=False)
    violated: np.ndarray = field(init=False)

    def __post_init__(self):
        self.gap = self.v_hat - self.v
        self.violated = self.gap > 1e-9

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "alpha": self.alpha,
            "v_hat": self.v_hat.tolist(),
            "v": self.v.tolist(),
            "gap": self.gap.tolist(),
            "threshold": self.threshold,
            "violated": self.violated.tolist(),
        }


def evaluate(config: CqlEvalConfig, source, target_policy: Policy, true_mdp: TabularMdp,
             pi_beta: Policy | None = None,
             concentration: ConcentrationConfig | None = None) -> EvalReport:
    """Fixed-point estimate of V^pi compared against the true value."""
    q_hat = cql_fixed_point(config, source, target_policy, pi_beta)
    v_hat = expected_q(target_policy, q_hat)
    v = policy_value(true_mdp, target_policy)
    threshold = 0.0
    if config.backup == "empirical" and concentration is not None:
        if config.variant == "eq1":
            threshold = alpha_threshold_eq1(source, concentration, config.mu)
        else:
            threshold = alpha_threshold_eq2(source, concentration, target_policy)
    return EvalReport(config.variant, config.alpha, v_hat, v, threshold)


def value_gap_closed_form(mdp: TabularMdp, target_policy: Policy, pi_beta: Policy,
                          alpha: float) -> np.ndarray:
    """V_hat - V for the exact ``eq2`` estimate with mu = pi:
    -alpha * (I - gamma P^pi_state)^{-1} d_cql(pi, pi_beta)."""
    p = state_transition_matrix(mdp, target_policy)
    a = np.eye(mdp.n_states) - mdp.gamma * p
    return -alpha * np.linalg.solve(a, d_cql(target_policy, pi_beta))


__all__ = [
    "CqlEvalConfig", "EvalReport", "alpha_threshold_eq1", "alpha_threshold_eq2",
    "cql_eq1_iterate", "cql_eq2_iterate", "cql_fixed_point", "d_cql", "evaluate",
    "penalty", "value_gap_closed_form",
]
