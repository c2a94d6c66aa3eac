"""Conservative Q-learning for finite MDPs and linear Q-functions."""

from ._kernels import BACKEND
from .datasets import (ConcentrationConfig, EmpiricalModel, TransitionDataset,
                       build_empirical_model, empirical_bellman_op, empirical_optimality_op,
                       estimate_concentration, overestimation_bound, sample_dataset)
from .errors import ConvergenceError, ShapeError, SingularSystemError, SupportError
from .evaluation import (CqlEvalConfig, alpha_threshold_eq1, alpha_threshold_eq2,
                         cql_eq1_iterate, cql_eq2_iterate, cql_fixed_point, d_cql, evaluate)
from .learning import (CqlLearnConfig, LearnTrace, cql_learn_step, cql_objective_value,
                       lagrange_alpha_update, mu_from_regularizer, run_cql)
from .linear import (LinearQModel, alpha_threshold_linear, cql_linear_iterate, lstdq_iterate,
                     ntk_gradient_step, projection_penalty)
from .mdp import (Policy, TabularMdp, bellman_optimality_op, bellman_policy_op, chain2,
                  discounted_state_marginal, exact_q, gridworld, policy_value, random_mdp,
                  return_j, soft_policy_from_q, total_variation)
from .analysis import (GapReport, SafeImprovementReport, gap_expanding_check,
                       nu_necessity_search, objective_equivalence_check, zeta_bound)

__version__ = "0.1.0"
