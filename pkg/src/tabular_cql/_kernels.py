"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and the environment
variable ``TABULAR_CQL_DISABLE_NUMBA`` is unset (or set to a false-like
value).  Both paths consume identical pre-drawn uniforms, so sampled
datasets are bit-identical across backends; fixed-point sweeps agree to
floating-point reassociation error.
"""

from __future__ import annotations

import os

import numpy as np

DISABLE_ENV = "TABULAR_CQL_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _numba_requested() -> bool:
    flag = os.environ.get(DISABLE_ENV, "").strip().lower()
    return flag not in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and _numba_requested()


def _njit(func):
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True, nogil=True)(func)


# ---------------------------------------------------------------------------
# categorical draws

def _draw(cdf, u):
    # first index with cdf[k] > u, capped at the last index
    k = 0
    n = cdf.shape[0]
    while k < n - 1 and cdf[k] <= u:
        k += 1
    return k


_draw_nb = _njit(_draw)


def _draw_rows(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (cdf_rows[:, :-1] <= u[:, None]).sum(axis=1)


def cumulative(probs: np.ndarray) -> np.ndarray:
    """Row-wise CDF along the last axis with the final entry pinned to 1."""
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    return np.ascontiguousarray(cdf)


# ---------------------------------------------------------------------------
# episodic rollouts

def _rollouts_loop(init_cdf, policy_cdf, trans_cdf, reward, r_max, bernoulli,
                   n_transitions, horizon, u_init, u):
    states = np.empty(n_transitions, np.int64)
    actions = np.empty(n_transitions, np.int64)
    rewards = np.empty(n_transitions, np.float64)
    next_states = np.empty(n_transitions, np.int64)
    i = 0
    e = 0
    while i < n_transitions:
        s = _draw_nb(init_cdf, u_init[e])
        for t in range(horizon):
            if i >= n_transitions:
                break
            a = _draw_nb(policy_cdf[s], u[e, t, 0])
            s2 = _draw_nb(trans_cdf[s, a], u[e, t, 1])
            r = reward[s, a]
            if bernoulli:
                r = r_max if u[e, t, 2] * r_max < r else 0.0
            states[i] = s
            actions[i] = a
            rewards[i] = r
            next_states[i] = s2
            i += 1
            s = s2
        e += 1
    return states, actions, rewards, next_states


def _rollouts_numpy(init_cdf, policy_cdf, trans_cdf, reward, r_max, bernoulli,
                    n_transitions, horizon, u_init, u):
    n_episodes = u_init.shape[0]
    S = np.empty((n_episodes, horizon), np.int64)
    A = np.empty((n_episodes, horizon), np.int64)
    R = np.empty((n_episodes, horizon), np.float64)
    S2 = np.empty((n_episodes, horizon), np.int64)
    s = _draw_rows(np.broadcast_to(init_cdf, (n_episodes, init_cdf.shape[0])), u_init)
    for t in range(horizon):
        a = _draw_rows(policy_cdf[s], u[:, t, 0])
        s2 = _draw_rows(trans_cdf[s, a], u[:, t, 1])
        r = reward[s, a]
        if bernoulli:
            r = np.where(u[:, t, 2] * r_max < r, r_max, 0.0)
        S[:, t], A[:, t], R[:, t], S2[:, t] = s, a, r, s2
        s = s2
    n = n_transitions
    return S.ravel()[:n], A.ravel()[:n], R.ravel()[:n], S2.ravel()[:n]


if HAVE_NUMBA:
    _rollouts_nb = numba.njit(cache=True)(_rollouts_loop)
else:  # pragma: no cover
    _rollouts_nb = None


# ---------------------------------------------------------------------------
# count accumulation

def _counts_loop(states, actions, rewards, next_states, n_states, n_actions):
    counts = np.zeros((n_states, n_actions), np.int64)
    reward_sum = np.zeros((n_states, n_actions), np.float64)
    trans = np.zeros((n_states, n_actions, n_states), np.int64)
    for i in range(states.shape[0]):
        s = states[i]
        a = actions[i]
        counts[s, a] += 1
        reward_sum[s, a] += rewards[i]
        trans[s, a, next_states[i]] += 1
    return counts, reward_sum, trans


def _counts_numpy(states, actions, rewards, next_states, n_states, n_actions):
    sa = states * n_actions + actions
    n_sa = n_states * n_actions
    counts = np.bincount(sa, minlength=n_sa).reshape(n_states, n_actions)
    reward_sum = np.bincount(sa, weights=rewards, minlength=n_sa).reshape(n_states, n_actions)
    trans = np.bincount(sa * n_states + next_states, minlength=n_sa * n_states)
    return (counts.astype(np.int64), reward_sum,
            trans.reshape(n_states, n_actions, n_states).astype(np.int64))


_counts_nb = _njit(_counts_loop)


# ---------------------------------------------------------------------------
# affine policy-evaluation fixed point: Q <- clip(c + gamma * T (pi . Q))

def _affine_fp_loop(c, trans, pi, gamma, tol, max_iters, lo, hi, q0):
    n_s, n_a = c.shape
    q = q0.copy()
    v = np.empty(n_s)
    residual = np.inf
    it = 0
    while it < max_iters:
        for s in range(n_s):
            acc = 0.0
            for a in range(n_a):
                acc += pi[s, a] * q[s, a]
            v[s] = acc
        residual = 0.0
        for s in range(n_s):
            for a in range(n_a):
                acc = 0.0
                for s2 in range(n_s):
                    acc += trans[s, a, s2] * v[s2]
                new = c[s, a] + gamma * acc
                if new < lo:
                    new = lo
                elif new > hi:
                    new = hi
                diff = abs(new - q[s, a])
                if diff > residual:
                    residual = diff
                q[s, a] = new
        it += 1
        if residual <= tol:
            break
    return q, it, residual


def _affine_fp_numpy(c, trans, pi, gamma, tol, max_iters, lo, hi, q0):
    q = q0.copy()
    residual = np.inf
    it = 0
    while it < max_iters:
        v = (pi * q).sum(axis=1)
        new = np.clip(c + gamma * (trans @ v), lo, hi)
        residual = float(np.max(np.abs(new - q)))
        q = new
        it += 1
        if residual <= tol:
            break
    return q, it, residual


_affine_fp_nb = _njit(_affine_fp_loop)


# ---------------------------------------------------------------------------
# Monte-Carlo discounted returns over truncated trajectories

def _returns_loop(init_cdf, policy_cdf, trans_cdf, reward, gamma, u_init, u):
    n_traj, horizon = u.shape[0], u.shape[1]
    out = np.empty(n_traj)
    for i in range(n_traj):
        s = _draw_nb(init_cdf, u_init[i])
        g = 0.0
        disc = 1.0
        for t in range(horizon):
            a = _draw_nb(policy_cdf[s], u[i, t, 0])
            g += disc * reward[s, a]
            disc *= gamma
            s = _draw_nb(trans_cdf[s, a], u[i, t, 1])
        out[i] = g
    return out


def _returns_numpy(init_cdf, policy_cdf, trans_cdf, reward, gamma, u_init, u):
    n_traj, horizon = u.shape[0], u.shape[1]
    s = _draw_rows(np.broadcast_to(init_cdf, (n_traj, init_cdf.shape[0])), u_init)
    g = np.zeros(n_traj)
    disc = 1.0
    for t in range(horizon):
        a = _draw_rows(policy_cdf[s], u[:, t, 0])
        g += disc * reward[s, a]
        disc *= gamma
        s = _draw_rows(trans_cdf[s, a], u[:, t, 1])
    return g


_returns_nb = _njit(_returns_loop)


IMPLEMENTATIONS = {
    "rollouts": {"numba": _rollouts_nb, "numpy": _rollouts_numpy},
    "counts": {"numba": _counts_nb, "numpy": _counts_numpy},
    "affine_fixed_point": {"numba": _affine_fp_nb, "numpy": _affine_fp_numpy},
    "discounted_returns": {"numba": _returns_nb, "numpy": _returns_numpy},
}

BACKEND = "numba" if USE_NUMBA else "numpy"

rollouts = IMPLEMENTATIONS["rollouts"][BACKEND]
counts = IMPLEMENTATIONS["counts"][BACKEND]
affine_fixed_point = IMPLEMENTATIONS["affine_fixed_point"][BACKEND]
discounted_returns = IMPLEMENTATIONS["discounted_returns"][BACKEND]
