"""Time the numba kernels against their numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 8]

Both backends are always importable from ``IMPLEMENTATIONS``, so one process
times both.  The first numba call (compilation or cache load) is excluded.
"""

import argparse
import time

import numpy as np

from tabular_cql import _kernels
from tabular_cql.mdp import Policy, gridworld


def _inputs(size: int, n_transitions: int, horizon: int, seed: int):
    mdp = gridworld(size, size, slip=0.1, gamma=0.95)
    pi = Policy.uniform(*mdp.shape)
    rng = np.random.default_rng(seed)
    n_episodes = -(-n_transitions // horizon)
    init_cdf = _kernels.cumulative(mdp.initial_dist)
    pol_cdf = _kernels.cumulative(pi.probs)
    trans_cdf = _kernels.cumulative(mdp.transition)
    reward = np.ascontiguousarray(mdp.reward)
    u_init = rng.random(n_episodes)
    u = rng.random((n_episodes, horizon, 3))
    rollout_args = (init_cdf, pol_cdf, trans_cdf, reward, mdp.r_max, True,
                    n_transitions, horizon, u_init, u)
    data = _kernels.IMPLEMENTATIONS["rollouts"]["numpy"](*rollout_args)
    fp_args = (reward, np.ascontiguousarray(mdp.transition), np.ascontiguousarray(pi.probs),
               mdp.gamma, 1e-10, 100_000, -np.inf, np.inf, np.zeros(mdp.shape))
    return {
        "rollouts": rollout_args,
        "counts": (*data, *mdp.shape),
        "affine_fixed_point": fp_args,
        "discounted_returns": (init_cdf, pol_cdf, trans_cdf, reward, mdp.gamma,
                               u_init, u[:, :, :2]),
    }


def _best_time(func, args, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        func(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--size", type=int, default=8, help="gridworld side length")
    parser.add_argument("--transitions", type=int, default=200_000)
    parser.add_argument("--horizon", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    inputs = _inputs(args.size, args.transitions, args.horizon, args.seed)
    print(f"{'kernel':<20} {'numba [ms]':>11} {'numpy [ms]':>11} {'speedup':>8}")
    for name, impls in _kernels.IMPLEMENTATIONS.items():
        call_args = inputs[name]
        times = {}
        for backend in ("numba", "numpy"):
            func = impls[backend]
            if func is None:
                times[backend] = np.nan
                continue
            func(*call_args)  # warm-up
            times[backend] = _best_time(func, call_args, args.repeat)
        ratio = times["numpy"] / times["numba"]
        print(f"{name:<20} {1e3 * times['numba']:>11.2f} {1e3 * times['numpy']:>11.2f} "
              f"{ratio:>7.1f}x")


if __name__ == "__main__":
    main()
