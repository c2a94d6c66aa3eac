"""Conservative evaluation with linear Q-functions Q = F w.

State-action pairs are flattened as ``s * n_actions + a``.  The squared
Bellman error is weighted by the data density D = diag(d(s) pi_beta(a|s)),
where d is the discounted state marginal of the behavior policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .datasets import EmpiricalModel
from .errors import ShapeError, SingularSystemError
from .mdp import Policy, TabularMdp, bellman_policy_op, discounted_state_marginal

COND_LIMIT = 1e12
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class LinearQModel:
    features: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        w = np.array(self.weights, dtype=np.float64).ravel()
        if f.ndim != 2 or f.shape[1] != w.size:
            raise ShapeError(f"features {f.shape} and weights {w.shape} disagree")
        f.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, features) -> "LinearQModel":
        features = np.asarray(features, dtype=np.float64)
        return cls(features, np.zeros(features.shape[1]))

    def q_vector(self) -> np.ndarray:
        return self.features @ self.weights

    def q(self, n_states: int, n_actions: int) -> np.ndarray:
        return self.q_vector().reshape(n_states, n_actions)

    def with_weights(self, weights) -> "LinearQModel":
        return LinearQModel(self.features, weights)

    def to_dict(self) -> dict:
        n, d = self.features.shape
        return {"n_rows": n, "n_features": d,
                "features": self.features.ravel().tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LinearQModel":
        f = np.asarray(data["features"], float).reshape(data["n_rows"], data["n_features"])
        return cls(f, data["weights"])


def data_density(mdp: TabularMdp, behavior: Policy) -> np.ndarray:
    """d^{pi_beta}(s) * pi_beta(a|s), flattened."""
    d = discounted_state_marginal(mdp, behavior)
    return (d[:, None] * behavior.probs).ravel()


def empirical_density(model: EmpiricalModel) -> np.ndarray:
    """Dataset frequencies |D(s,a)| / |D|, flattened."""
    return (model.counts / model.counts.sum()).ravel()


def random_features(n_rows: int, n_features: int, rng: np.random.Generator,
                    constant_column: bool = False, max_draws: int = 100) -> np.ndarray:
    """Standard-normal features, re-drawn until full column rank.

    With ``constant_column`` the first column is all ones.
    """
    for _ in range(max_draws):
        f = rng.standard_normal((n_rows, n_features))
        if constant_column:
            f[:, 0] = 1.0
        if np.linalg.matrix_rank(f) == n_features:
            return f
    raise SingularSystemError("could not draw full-rank features")


def _check(fa: LinearQModel, mdp: TabularMdp) -> None:
    if fa.features.shape[0] != mdp.n_states * mdp.n_actions:
        raise ShapeError("feature rows must equal the number of state-action pairs")


def _gram_factor(features: np.ndarray, density: np.ndarray):
    gram = features.T @ (density[:, None] * features)
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystemError(
            f"F^T D F is singular or ill-conditioned (condition number {cond:.3g})", cond)
    return linalg.lu_factor(gram, check_finite=False)


def _weighted_solve(features: np.ndarray, density: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """(F^T D F)^{-1} rhs."""
    return linalg.lu_solve(_gram_factor(features, density), rhs, check_finite=False)


def projection_matrix(features, density) -> np.ndarray:
    """P_F = F (F^T D F)^{-1} F^T D, the D-orthogonal projector onto span(F)."""
    features = np.asarray(features, dtype=np.float64)
    density = np.asarray(density, dtype=np.float64)
    return features @ _weighted_solve(features, density, features.T * density[None, :])


def _target(mdp: TabularMdp, target_policy: Policy, q_prev) -> np.ndarray:
    return bellman_policy_op(mdp, target_policy, q_prev).ravel()


def lstdq_iterate(fa: LinearQModel, mdp: TabularMdp, behavior: Policy, target_policy: Policy,
                  q_prev, density: np.ndarray | None = None) -> LinearQModel:
    """w = (F^T D F)^{-1} F^T D (B^pi Q_prev)."""
    _check(fa, mdp)
    dens = data_density(mdp, behavior) if density is None else np.asarray(density, float)
    f = fa.features
    rhs = f.T @ (dens * _target(mdp, target_policy, q_prev))
    return fa.with_weights(_weighted_solve(f, dens, rhs))


def _ratio_minus_one(mu: Policy, behavior: Policy) -> np.ndarray:
    b = behavior.probs
    if np.any((mu.probs > 0) & (b <= 0)):
        raise ValueError("mu puts mass where the behavior policy has none")
    return np.divide(mu.probs - b, b, out=np.zeros_like(b), where=b > 0).ravel()


def cql_linear_iterate(fa: LinearQModel, mdp: TabularMdp, behavior: Policy,
                       target_policy: Policy, alpha_k: float, q_prev,
                       mu: Policy | None = None,
                       density: np.ndarray | None = None) -> LinearQModel:
    """Solve (F^T D F) w = F^T D (B^pi Q_prev) - alpha_k F^T D (mu - pi_beta) / pi_beta.

    ``mu`` defaults to the target policy.
    """
    _check(fa, mdp)
    mu = target_policy if mu is None else mu
    dens = data_density(mdp, behavior) if density is None else np.asarray(density, float)
    f = fa.features
    rhs = f.T @ (dens * (_target(mdp, target_policy, q_prev)
                         - alpha_k * _ratio_minus_one(mu, behavior)))
    return fa.with_weights(_weighted_solve(f, dens, rhs))


def projection_penalty(fa: LinearQModel, mdp: TabularMdp, behavior: Policy,
                       pi: Policy) -> np.ndarray:
    """Per-state sum_a pi(a|s) [P_F (pi - pi_beta) / pi_beta](s, a)."""
    _check(fa, mdp)
    dens = data_density(mdp, behavior)
    x = _ratio_minus_one(pi, behavior)
    px = projection_matrix(fa.features, dens) @ x
    return (pi.probs * px.reshape(mdp.shape)).sum(axis=1)


def projection_penalty_weighted(fa: LinearQModel, mdp: TabularMdp, behavior: Policy,
                                pi: Policy) -> float:
    """The per-state projection penalty averaged under d^{pi_beta}."""
    d = discounted_state_marginal(mdp, behavior)
    return float(d @ projection_penalty(fa, mdp, behavior, pi))


@dataclass(frozen=True)
class LinearThreshold:
    alpha: float
    numerator: float
    denominator: float
    feasible: bool


def alpha_threshold_linear_detail(fa: LinearQModel, mdp: TabularMdp, behavior: Policy,
                                  target_policy: Policy, q_prev) -> LinearThreshold:
    """Smallest alpha_k >= 0 with E_d[V_hat_{k+1}] <= E_d[V_{k+1}].

    With w_pi(s, a) = d(s) pi(a|s), y = B^pi Q_prev and x = (pi - pi_beta) / pi_beta,
    the condition is alpha * w_pi^T P_F x >= w_pi^T (P_F - I) y.  When the left
    coefficient is not positive and the right side is, no alpha works and the
    result is +inf with ``feasible=False``.
    """
    _check(fa, mdp)
    d = discounted_state_marginal(mdp, behavior)
    dens = (d[:, None] * behavior.probs).ravel()
    w_pi = (d[:, None] * target_policy.probs).ravel()
    y = _target(mdp, target_policy, q_prev)
    x = _ratio_minus_one(target_policy, behavior)
    p = projection_matrix(fa.features, dens)
    num = float(w_pi @ (p @ y - y))
    den = float(w_pi @ (p @ x))
    # both sides are differences of O(|w_pi| |y|) terms; rounding noise at
    # that scale counts as zero
    if abs(num) <= ZERO_TOL * (1.0 + float(np.abs(w_pi) @ np.abs(y))):
        num = 0.0
    if abs(den) <= ZERO_TOL * (1.0 + float(np.abs(w_pi) @ np.abs(x))):
        den = 0.0
    if den > 0:
        return LinearThreshold(max(num / den, 0.0), num, den, True)
    if num <= 0:
        return LinearThreshold(0.0, num, den, True)
    return LinearThreshold(float("inf"), num, den, False)


def alpha_threshold_linear(fa: LinearQModel, mdp: TabularMdp, behavior: Policy,
                           target_policy: Policy, q_prev) -> float:
    return alpha_threshold_linear_detail(fa, mdp, behavior, target_policy, q_prev).alpha


def expected_value_under_data(mdp: TabularMdp, behavior: Policy, target_policy: Policy,
                              q) -> float:
    """E_{s~d^{pi_beta}} E_{a~pi}[Q(s, a)]."""
    d = discounted_state_marginal(mdp, behavior)
    return float(d @ (target_policy.probs * np.asarray(q).reshape(mdp.shape)).sum(axis=1))


def ntk_matrix(fa: LinearQModel) -> np.ndarray:
    """Gradient Gram matrix of Q = F w with respect to w: F F^T."""
    return fa.features @ fa.features.T


def ntk_gradient_step(fa: LinearQModel, mdp: TabularMdp, behavior: Policy,
                      target_policy: Policy, alpha_k: float, eta: float, q_prev,
                      mu: Policy | None = None) -> np.ndarray:
    """Q-space effect of one gradient step on w from Q_prev = F w:

    Q_next = Q_prev - eta alpha_k M D (mu - pi_beta) / pi_beta + eta M D (B^pi Q_prev - Q_prev)

    with M = F F^T.  Exact for linear Q.
    """
    _check(fa, mdp)
    mu = target_policy if mu is None else mu
    q = np.asarray(q_prev, dtype=np.float64).ravel()
    dens = data_density(mdp, behavior)
    m = ntk_matrix(fa)
    x = _ratio_minus_one(mu, behavior)
    y = _target(mdp, target_policy, q_prev)
    out = q - eta * alpha_k * (m @ (dens * x)) + eta * (m @ (dens * (y - q)))
    return out.reshape(mdp.shape)


def ntk_penalty_term(fa: LinearQModel | None, mdp: TabularMdp, behavior: Policy, pi: Policy,
                     m: np.ndarray | None = None) -> np.ndarray:
    """Per-state sum_a pi(a|s) [M D (pi - pi_beta) / pi_beta](s, a), M = F F^T by default."""
    if m is None:
        m = ntk_matrix(fa)
    dens = data_density(mdp, behavior)
    v = m @ (dens * _ratio_minus_one(pi, behavior))
    return (pi.probs * v.reshape(mdp.shape)).sum(axis=1)
