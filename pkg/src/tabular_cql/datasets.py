"""Offline transition datasets and the empirical model they induce."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .mdp import Policy, TabularMdp, expected_q
from .errors import ShapeError

REWARD_NOISE = ("none", "bernoulli")


@dataclass(frozen=True)
class TransitionDataset:
    """Parallel arrays of (s, a, r, s') tuples."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    source_mdp_id: str = "mdp"
    rng_seed: int = 0

    def __post_init__(self):
        cols = {}
        for name, dtype in (("states", np.int64), ("actions", np.int64),
                            ("rewards", np.float64), ("next_states", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype, copy=True).ravel()
            arr.setflags(write=False)
            cols[name] = arr
        n = {arr.size for arr in cols.values()}
        if len(n) != 1:
            raise ShapeError("dataset columns have different lengths")
        for name, arr in cols.items():
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.states.size

    def head(self, n: int) -> "TransitionDataset":
        """First ``n`` tuples; prefixes of one dataset are nested datasets."""
        return TransitionDataset(self.states[:n], self.actions[:n], self.rewards[:n],
                                 self.next_states[:n], self.source_mdp_id, self.rng_seed)

    def validate_against(self, mdp: TabularMdp) -> None:
        n_s, n_a = mdp.shape
        if len(self) and (self.states.min() < 0 or self.states.max() >= n_s
                          or self.next_states.min() < 0 or self.next_states.max() >= n_s
                          or self.actions.min() < 0 or self.actions.max() >= n_a):
            raise ValueError("dataset indices out of range for the MDP")
        if len(self) and np.max(np.abs(self.rewards)) > mdp.r_max + 1e-12:
            raise ValueError("dataset rewards exceed the MDP's r_max")


def sample_dataset(mdp: TabularMdp, behavior: Policy, n_transitions: int,
                   horizon: int, seed: int, reward_noise: str = "none") -> TransitionDataset:
    """Episodic rollouts from the start distribution, truncated at ``horizon``,
    concatenated until ``n_transitions`` tuples are collected.  For a fixed
    seed, datasets of different sizes are nested.

    ``reward_noise="bernoulli"`` replaces each reward by ``r_max`` with
    probability ``r / r_max`` and 0 otherwise, which keeps the mean at ``r``.
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be at least 1")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if behavior.shape != mdp.shape:
        raise ShapeError("behavior policy does not match the MDP")
    if reward_noise not in REWARD_NOISE:
        raise ValueError(f"reward_noise must be one of {REWARD_NOISE}")
    bernoulli = reward_noise == "bernoulli"
    if bernoulli and (mdp.reward.min() < 0 or mdp.r_max <= 0):
        raise ValueError("bernoulli rewards need 0 <= r <= r_max with r_max > 0")
    n_episodes = -(-n_transitions // horizon)
    rng = np.random.default_rng(seed)
    # one row of uniforms per episode, so a smaller request with the same
    # seed yields a prefix of a larger one
    block = rng.random((n_episodes, 1 + 3 * horizon))
    u_init = np.ascontiguousarray(block[:, 0])
    u = np.ascontiguousarray(block[:, 1:]).reshape(n_episodes, horizon, 3)
    s, a, r, s2 = _kernels.rollouts(
        _kernels.cumulative(mdp.initial_dist), _kernels.cumulative(behavior.probs),
        _kernels.cumulative(mdp.transition), np.ascontiguousarray(mdp.reward),
        mdp.r_max, bernoulli, n_transitions, horizon, u_init, u)
    return TransitionDataset(s, a, r, s2, mdp.name, seed)


@dataclass(frozen=True)
class EmpiricalModel:
    """Counts-based model of an MDP estimated from a dataset.

    Unvisited pairs have ``r_hat = 0`` and all-zero ``t_hat`` rows; unvisited
    states get a uniform ``pi_beta_hat`` row and are flagged in
    ``visited_states``.
    """

    counts: np.ndarray
    state_counts: np.ndarray
    r_hat: np.ndarray
    t_hat: np.ndarray
    pi_beta_hat: Policy
    inv_sqrt_counts: np.ndarray
    gamma: float
    r_max: float
    sentinel: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    @property
    def n_actions(self) -> int:
        return self.counts.shape[1]

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())

    @property
    def visited_pairs(self) -> np.ndarray:
        return self.counts > 0

    @property
    def visited_states(self) -> np.ndarray:
        return self.state_counts > 0

    @property
    def state_freq(self) -> np.ndarray:
        """Empirical state frequencies |D(s)| / |D|."""
        return self.state_counts / self.state_counts.sum()

    @property
    def floor(self) -> float:
        """Pessimistic backup returned at unvisited pairs."""
        return -2.0 * self.r_max / (1.0 - self.gamma)

    @property
    def sentinel_pairs(self) -> np.ndarray:
        """Pairs whose inverse-root count is the zero-count sentinel."""
        return ~self.visited_pairs

    def to_mdp(self, initial_dist=None, name: str = "empirical") -> TabularMdp:
        """The empirical MDP.  Unvisited pairs self-loop with reward -r_max."""
        n_s, n_a = self.shape
        t = self.t_hat.copy()
        r = self.r_hat.copy()
        for s, a in zip(*np.nonzero(~self.visited_pairs)):
            t[s, a] = 0.0
            t[s, a, s] = 1.0
            r[s, a] = -self.r_max
        if initial_dist is None:
            initial_dist = np.full(n_s, 1.0 / n_s)
        return TabularMdp(t, r, self.gamma, initial_dist, self.r_max, name)


def build_empirical_model(dataset: TransitionDataset, mdp: TabularMdp,
                          sentinel: float | None = None) -> EmpiricalModel:
    """Counts, mean rewards, transition frequencies and the behavior estimate.

    ``mdp`` supplies the shape, discount and reward bound only.  The zero-count
    sentinel defaults to 2 * r_max / (1 - gamma) and may not be smaller.
    """
    if len(dataset) == 0:
        raise ValueError("cannot build a model from an empty dataset")
    dataset.validate_against(mdp)
    n_s, n_a = mdp.shape
    min_sentinel = 2.0 * mdp.r_max / (1.0 - mdp.gamma)
    if sentinel is None:
        sentinel = min_sentinel
    if sentinel < min_sentinel:
        raise ValueError(f"sentinel must be at least {min_sentinel}")
    counts, reward_sum, trans = _kernels.counts(
        dataset.states, dataset.actions, dataset.rewards, dataset.next_states, n_s, n_a)
    visited = counts > 0
    safe = np.maximum(counts, 1)
    r_hat = np.where(visited, reward_sum / safe, 0.0)
    t_hat = trans / safe[:, :, None]
    state_counts = counts.sum(axis=1)
    pi = np.full((n_s, n_a), 1.0 / n_a)
    seen = state_counts > 0
    pi[seen] = counts[seen] / state_counts[seen, None]
    inv_sqrt = np.where(visited, 1.0 / np.sqrt(safe), sentinel)
    arrays = [counts, state_counts, r_hat, t_hat, inv_sqrt]
    for arr in arrays:
        arr.setflags(write=False)
    return EmpiricalModel(counts, state_counts, r_hat, t_hat, Policy(pi), inv_sqrt,
                          mdp.gamma, mdp.r_max, float(sentinel))


def empirical_bellman_op(model: EmpiricalModel, policy: Policy, q) -> np.ndarray:
    """Sample-based policy backup; the pessimistic floor at unvisited pairs."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != model.shape or policy.shape != model.shape:
        raise ShapeError("Q, policy and model shapes disagree")
    out = model.r_hat + model.gamma * (model.t_hat @ expected_q(policy, q))
    return np.where(model.visited_pairs, out, model.floor)


def empirical_optimality_op(model: EmpiricalModel, q) -> np.ndarray:
    """Sample-based max backup; the pessimistic floor at unvisited pairs."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != model.shape:
        raise ShapeError("Q and model shapes disagree")
    out = model.r_hat + model.gamma * (model.t_hat @ q.max(axis=1))
    return np.where(model.visited_pairs, out, model.floor)


@dataclass(frozen=True)
class ConcentrationConfig:
    """Reward and transition concentration constants at confidence 1 - delta."""

    c_r: float
    c_t: float
    delta: float = 0.1

    def __post_init__(self):
        if self.c_r < 0 or self.c_t < 0:
            raise ValueError("concentration constants must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")

    def combined(self, gamma: float, r_max: float) -> float:
        """c_r + gamma * c_t * 2 r_max / (1 - gamma)."""
        return self.c_r + gamma * self.c_t * 2.0 * r_max / (1.0 - gamma)


def overestimation_bound(model: EmpiricalModel, cfg: ConcentrationConfig,
                         gamma: float | None = None, r_max: float | None = None) -> np.ndarray:
    """Per-pair bound on |B_hat^pi Q - B^pi Q| for Q bounded by 2 r_max / (1 - gamma)."""
    gamma = model.gamma if gamma is None else gamma
    r_max = model.r_max if r_max is None else r_max
    return cfg.combined(gamma, r_max) * model.inv_sqrt_counts


def concentration_statistics(model: EmpiricalModel, mdp: TabularMdp) -> tuple[float, float]:
    """max over visited pairs of sqrt(n)|r_hat - r| and sqrt(n)||T_hat - T||_1."""
    vis = model.visited_pairs
    root_n = np.sqrt(model.counts[vis])
    dr = root_n * np.abs(model.r_hat - mdp.reward)[vis]
    dt = root_n * np.abs(model.t_hat - mdp.transition).sum(axis=2)[vis]
    return float(dr.max()), float(dt.max())


def estimate_concentration(mdp: TabularMdp, behavior: Policy, n_transitions: int,
                           horizon: int, delta: float, n_resamples: int = 200,
                           seed: int = 0, reward_noise: str = "none") -> ConcentrationConfig:
    """Resampling estimate of the concentration constants.

    Each constant is the (1 - delta/2) quantile of its statistic over
    ``n_resamples`` datasets, so both hold jointly with probability at
    least 1 - delta by a union bound.
    """
    seeds = np.random.SeedSequence(seed).generate_state(n_resamples)
    stats = np.array([
        concentration_statistics(
            build_empirical_model(
                sample_dataset(mdp, behavior, n_transitions, horizon, int(s), reward_noise),
                mdp),
            mdp)
        for s in seeds
    ])
    q = 1.0 - delta / 2.0
    return ConcentrationConfig(float(np.quantile(stats[:, 0], q)),
                               float(np.quantile(stats[:, 1], q)), delta)


# ---------------------------------------------------------------------------
# serialization

def dataset_to_csv(dataset: TransitionDataset) -> str:
    buf = io.StringIO()
    buf.write(f"# mdp_id={dataset.source_mdp_id} seed={dataset.rng_seed}\n")
    buf.write("s,a,r,s_next\n")
    for s, a, r, s2 in zip(dataset.states.tolist(), dataset.actions.tolist(),
                           dataset.rewards.tolist(), dataset.next_states.tolist()):
        buf.write(f"{s},{a},{r!r},{s2}\n")
    return buf.getvalue()


def dataset_from_csv(text: str) -> TransitionDataset:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("dataset file must start with a '# mdp_id=... seed=...' header")
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
    if lines[1].strip() != "s,a,r,s_next":
        raise ValueError("dataset file is missing the 's,a,r,s_next' column header")
    rows = [ln.split(",") for ln in lines[2:] if ln.strip()]
    if not rows:
        return TransitionDataset([], [], [], [], meta.get("mdp_id", "mdp"),
                                 int(meta.get("seed", 0)))
    cols = list(zip(*rows))
    return TransitionDataset(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                             np.array(cols[2], dtype=np.float64),
                             np.array(cols[3], dtype=np.int64),
                             meta.get("mdp_id", "mdp"), int(meta.get("seed", 0)))


def save_dataset(dataset: TransitionDataset, path) -> None:
    Path(path).write_text(dataset_to_csv(dataset))


def load_dataset(path) -> TransitionDataset:
    return dataset_from_csv(Path(path).read_text())


def model_to_dict(model: EmpiricalModel) -> dict:
    return {
        "n_states": model.n_states,
        "n_actions": model.n_actions,
        "gamma": model.gamma,
        "r_max": model.r_max,
        "sentinel": model.sentinel,
        "counts": model.counts.ravel().tolist(),
        "r_hat": model.r_hat.ravel().tolist(),
        "t_hat": model.t_hat.ravel().tolist(),
        "pi_beta_hat": model.pi_beta_hat.probs.ravel().tolist(),
        "inv_sqrt_counts": model.inv_sqrt_counts.ravel().tolist(),
        "unvisited_states": np.nonzero(~model.visited_states)[0].tolist(),
    }


def model_to_json(model: EmpiricalModel) -> str:
    return json.dumps(model_to_dict(model), indent=1) + "\n"
