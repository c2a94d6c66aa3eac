"""Command-line runner: generate MDPs and datasets, evaluate, learn, verify.

Exit codes: 0 when every check passed, 1 when a violation was found,
2 for configuration errors (reported before anything runs).  Output files
go to ``--out``, defaulting to $TABULAR_CQL_OUT or the working directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import suites
from .datasets import build_empirical_model, load_dataset, sample_dataset, save_dataset
from .evaluation import CqlEvalConfig, cql_fixed_point
from .learning import CqlLearnConfig, run_cql
from .mdp import (Policy, chain2, expected_q, gridworld, load_mdp, policy_from_dict,
                  policy_to_dict, policy_value, random_mdp, save_mdp)

OUT_ENV = "TABULAR_CQL_OUT"
EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 1, 2
THEOREMS = ("T1", "T2", "T3", "T4", "T5", "T6", "D1", "D3", "SAMPLING", "GAPS", "ORACLES")
_ALPHA_KEYWORD = {"T1": "alphas", "T2": "alphas", "T5": "alpha", "T6": "alpha", "GAPS": "alpha"}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def parse_seeds(text) -> list[int]:
    """``"N"`` -> 0..N-1, ``"a:b"`` -> a..b-1, ``"1,5,9"`` -> that list."""
    if isinstance(text, int):
        seeds = list(range(text))
    elif isinstance(text, list):
        seeds = [int(s) for s in text]
    else:
        text = str(text).strip()
        try:
            if ":" in text:
                lo, hi = text.split(":")
                seeds = list(range(int(lo), int(hi)))
            elif "," in text:
                seeds = [int(s) for s in text.split(",") if s.strip()]
            else:
                seeds = list(range(int(text)))
        except ValueError:
            raise ConfigError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise ConfigError("the seed list is empty")
    return seeds


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _dump_json(data) -> str:
    return json.dumps(data, indent=1, sort_keys=True, default=_json_default) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _load_mdp(path):
    if path is None:
        raise ConfigError("--mdp is required")
    try:
        return load_mdp(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load MDP from {path}: {exc}") from None


def _load_policy(spec, mdp, what: str) -> Policy:
    if spec is None or spec == "uniform":
        return Policy.uniform(mdp.n_states, mdp.n_actions)
    try:
        policy = policy_from_dict(json.loads(Path(spec).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load {what} policy from {spec}: {exc}") from None
    if policy.shape != mdp.shape:
        raise ConfigError(f"{what} policy has shape {policy.shape}, MDP has {mdp.shape}")
    return policy


def _apply_config(args) -> None:
    """Fill unset flags from the --config JSON file; flags win."""
    if not args.config:
        return
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("the config file must hold a JSON object")
    for key, value in data.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest) or dest in ("command", "func", "config"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if getattr(args, dest) is None:
            setattr(args, dest, value)


def _pick(value, default):
    return default if value is None else value


# ---------------------------------------------------------------------------
# commands

def cmd_gen_mdp(args) -> int:
    kind = _pick(args.kind, "chain2")
    gamma = float(_pick(args.gamma, 0.9))
    try:
        if kind == "chain2":
            mdp = chain2(gamma=gamma, slip=float(_pick(args.slip, 0.0)))
        elif kind == "gridworld":
            mdp = gridworld(int(_pick(args.width, 4)), int(_pick(args.height, 4)),
                            slip=float(_pick(args.slip, 0.1)), gamma=gamma)
        elif kind == "random":
            mdp = random_mdp(int(_pick(args.states, 5)), int(_pick(args.actions, 3)),
                             args.branching, seed=int(_pick(args.seed, 0)), gamma=gamma)
        else:
            raise ConfigError(f"unknown MDP kind {kind!r}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = _out_dir(args) / _pick(args.name, "mdp.json")
    save_mdp(mdp, path)
    print(path)
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    mdp = _load_mdp(args.mdp)
    behavior = _load_policy(args.behavior, mdp, "behavior")
    n = int(_pick(args.n, 1000))
    if n < 1:
        raise ConfigError("--n must be positive")
    out = _out_dir(args)
    ds = sample_dataset(mdp, behavior, n, _pick(args.horizon, 50), int(_pick(args.seed, 0)),
                        _pick(args.reward_noise, "none"))
    path = out / _pick(args.name, "dataset.csv")
    save_dataset(ds, path)
    print(path)
    return EXIT_OK


def _eval_config(args, mdp, target):
    mu = _load_policy(args.mu, mdp, "mu") if args.mu else target
    try:
        return CqlEvalConfig(float(_pick(args.alpha, 1.0)), mu, _pick(args.variant, "eq2"),
                             "empirical" if args.dataset else "exact",
                             counts_weighted_alpha=bool(args.counts_weighted))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_eval(args) -> int:
    mdp = _load_mdp(args.mdp)
    target = _load_policy(args.policy, mdp, "target")
    behavior = _load_policy(args.behavior, mdp, "behavior")
    cfg = _eval_config(args, mdp, target)
    out = _out_dir(args)
    if args.dataset:
        source = build_empirical_model(load_dataset(args.dataset), mdp)
        q_hat = cql_fixed_point(cfg, source, target)
    else:
        q_hat = cql_fixed_point(cfg, mdp, target, behavior)
    v_hat = expected_q(target, q_hat)
    v = policy_value(mdp, target)
    if _pick(args.format, "csv") == "json":
        path = out / "eval.json"
        path.write_text(_dump_json({"variant": cfg.variant, "alpha": cfg.alpha,
                                    "backup": cfg.backup, "q_hat": q_hat, "v_hat": v_hat,
                                    "v": v, "gap": v_hat - v}))
    else:
        path = out / "eval.csv"
        path.write_text(_csv_text(
            ("state", "v_hat", "v", "gap"),
            ((s, float(v_hat[s]), float(v[s]), float(v_hat[s] - v[s]))
             for s in range(mdp.n_states))))
    print(path)
    return EXIT_OK


def cmd_learn(args) -> int:
    mdp = _load_mdp(args.mdp)
    try:
        cfg = CqlLearnConfig(
            regularizer=_pick(args.regularizer, "H"), alpha=float(_pick(args.alpha, 1.0)),
            lagrange=args.tau is not None, tau=float(_pick(args.tau, 1.0)),
            dual_step=float(_pick(args.dual_step, 0.1)),
            temperature=float(_pick(args.temperature, 1.0)), iters=int(_pick(args.iters, 100)),
            policy_step=float(_pick(args.policy_step, 0.5)),
            critic_step=float(_pick(args.critic_step, 0.5)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    if args.dataset:
        res = run_cql(cfg, build_empirical_model(load_dataset(args.dataset), mdp), true_mdp=mdp)
    else:
        res = run_cql(cfg, mdp, _load_policy(args.behavior, mdp, "behavior"), true_mdp=mdp)
    (out / "policy.json").write_text(_dump_json(policy_to_dict(res.policy)))
    if _pick(args.format, "csv") == "json":
        trace = {c: list(col) for c, col in zip(res.trace.COLUMNS, zip(*res.trace.rows()))}
        (out / "trace.json").write_text(_dump_json(trace))
        (out / "q.json").write_text(_dump_json({"q": res.q, "alpha": res.alpha}))
    else:
        (out / "trace.csv").write_text(res.trace.to_csv())
        (out / "q.csv").write_text(_csv_text(
            ("state", "action", "q"),
            ((s, a, float(res.q[s, a])) for s in range(mdp.n_states)
             for a in range(mdp.n_actions))))
    print(out)
    return EXIT_OK


def _suite_kwargs(args, theorem: str) -> dict:
    kwargs = {}
    if args.alpha is not None:
        alpha = float(args.alpha)
        if not (math.isfinite(alpha) and alpha >= 0):
            raise ConfigError(f"alpha must be a finite nonnegative number, got {args.alpha}")
        key = _ALPHA_KEYWORD.get(theorem)
        if key is None:
            raise ConfigError(f"{theorem} does not take --alpha")
        kwargs[key] = (alpha,) if key == "alphas" else alpha
    if args.mdp is not None:
        if theorem not in ("T1", "T2"):
            raise ConfigError(f"{theorem} does not take --mdp")
        kwargs["mdp"] = _load_mdp(args.mdp)
    if args.delta is not None:
        if theorem not in ("T6", "SAMPLING"):
            raise ConfigError(f"{theorem} does not take --delta")
        if not 0 < float(args.delta) < 1:
            raise ConfigError("delta must lie in (0, 1)")
        kwargs["delta"] = float(args.delta)
    if theorem != "ORACLES":
        kwargs["workers"] = int(_pick(args.workers, 1))
        if kwargs["workers"] < 1:
            raise ConfigError("--workers must be positive")
    return kwargs


def run_verify(theorem: str, seeds, kwargs) -> suites.SuiteResult:
    if theorem == "ORACLES":
        return suites.oracle_suite(seed=seeds[0] if seeds else 0)
    if theorem == "D1":
        n_proj = max(10_000, 100 * len(seeds))
        kwargs = {"projection_seeds": range(10**6, 10**6 + n_proj), **kwargs}
    return suites.SUITES[theorem](seeds, **kwargs)


def cmd_verify(args) -> int:
    theorem = args.theorem.upper()
    if theorem not in THEOREMS:
        raise ConfigError(f"unknown theorem id {args.theorem!r}; choose from {THEOREMS}")
    seeds = parse_seeds(_pick(args.seeds, suites.DEFAULT_SEEDS.get(theorem, 1)))
    kwargs = _suite_kwargs(args, theorem)
    out = _out_dir(args)
    result = run_verify(theorem, seeds, kwargs)
    summary = {"theorem": theorem, "n_seeds": len(seeds), **result.to_dict()}
    # wall time goes to stdout only so the files stay reproducible
    summary.pop("elapsed")
    if _pick(args.format, "json") == "csv":
        path = out / f"verify_{theorem}.csv"
        path.write_text(_csv_text(("theorem", "name", "passed", "checked", "failures"),
                                  [(theorem, result.name, result.passed, result.checked,
                                    result.failures)]))
    else:
        path = out / f"verify_{theorem}.json"
        path.write_text(_dump_json(summary))
    print(f"{theorem}: {result.line()}")
    for note in result.notes:
        print(f"  note: {note}")
    return EXIT_OK if result.passed else EXIT_VIOLATION


def _read_summary(path: Path) -> dict:
    if path.suffix == ".json":
        return json.loads(path.read_text())
    row = next(csv.DictReader(io.StringIO(path.read_text())))
    return {"theorem": row["theorem"], "name": row["name"], "passed": row["passed"] == "True",
            "checked": int(row["checked"]), "failures": int(row["failures"])}


def cmd_report(args) -> int:
    out = _out_dir(args)
    paths = [Path(p) for p in args.inputs] if args.inputs else sorted(
        p for p in out.glob("verify_*.*") if p.suffix in (".json", ".csv"))
    if not paths:
        raise ConfigError(f"no verify_* summaries found in {out}")
    try:
        rows = [_read_summary(p) for p in paths]
    except (OSError, ValueError, KeyError, StopIteration) as exc:
        raise ConfigError(f"cannot read summaries: {exc}") from None
    rows.sort(key=lambda r: r["theorem"])
    table = [(r["theorem"], r["passed"], r["checked"], r["failures"]) for r in rows]
    if _pick(args.format, "csv") == "json":
        path = out / "report.json"
        path.write_text(_dump_json([dict(zip(("theorem", "passed", "checked", "failures"), t))
                                    for t in table]))
    else:
        path = out / "report.csv"
        path.write_text(_csv_text(("theorem", "passed", "checked", "failures"), table))
    for theorem, passed, checked, failures in table:
        print(f"{'PASS' if passed else 'FAIL'} {theorem}: {checked - failures}/{checked} ok")
    n_failed = sum(not t[1] for t in table)
    print(f"{len(table) - n_failed}/{len(table)} suites passed")
    return EXIT_OK if n_failed == 0 else EXIT_VIOLATION


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabular-cql", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--config", help="JSON file of flag values; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-mdp", parents=[common], help="write an MDP file")
    p.add_argument("--kind", choices=("chain2", "gridworld", "random"))
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--states", type=int)
    p.add_argument("--actions", type=int)
    p.add_argument("--branching", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--slip", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--name", help="file name inside --out (default mdp.json)")
    p.set_defaults(func=cmd_gen_mdp)

    p = sub.add_parser("gen-dataset", parents=[common], help="sample a transition dataset")
    p.add_argument("--mdp")
    p.add_argument("--behavior", help="policy JSON file or 'uniform'")
    p.add_argument("--n", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--reward-noise", choices=("none", "bernoulli"))
    p.add_argument("--name", help="file name inside --out (default dataset.csv)")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("eval", parents=[common], help="conservative policy evaluation")
    p.add_argument("--mdp")
    p.add_argument("--dataset", help="use the empirical backup built from this dataset")
    p.add_argument("--policy", help="target policy JSON file or 'uniform'")
    p.add_argument("--behavior", help="behavior policy for the exact backup")
    p.add_argument("--mu", help="penalty policy (default: the target policy)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--variant", choices=("eq1", "eq2"))
    p.add_argument("--counts-weighted", action="store_true", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("learn", parents=[common], help="run conservative Q-learning")
    p.add_argument("--mdp")
    p.add_argument("--dataset")
    p.add_argument("--behavior")
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float, help="Lagrange budget; enables dual updates of alpha")
    p.add_argument("--dual-step", type=float)
    p.add_argument("--regularizer", choices=("H", "rho", "var"))
    p.add_argument("--temperature", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--policy-step", type=float)
    p.add_argument("--critic-step", type=float)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("verify", parents=[common], help="run a verification suite")
    p.add_argument("theorem", help=", ".join(THEOREMS))
    p.add_argument("--seeds", help="N, a:b, or a comma-separated list")
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--mdp", help="run T1/T2 on this MDP instead of random ones")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", parents=[common], help="aggregate verify summaries")
    p.add_argument("inputs", nargs="*", help="summary files (default: verify_* in --out)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        _apply_config(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
