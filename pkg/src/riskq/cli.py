"""Command-line reproduction driver.

Subcommands run the named experiments (grid world and the three tank
problems), generic weight sweeps from a config file, policy evaluation, and
oracle cross-checks.  Every run archives its resolved config next to the
emitted CSVs and figures; flags override config-file values.

Config file schema (JSON)::

    {
      "experiment": "gridworld" | "tank-y-clc" | "tank-y-olc" | "tank-yc-clc",
      "seed": 1,
      "out": "runs/gridworld",
      "omega": 0.13,
      "learning": {          # all optional, defaults per experiment
        "gamma": 0.9, "gamma_bar": 1.0,
        "alpha_c": 1.0,              # tabular step size c/(c+n), per pair
        "net_rate": 0.15,            # net gradient step size
        "epsilon_start": 0.3, "epsilon_end": 0.1,
        "episodes_per_xi": 2500, "episodes_first_phase": 15000,
        "stability_window": 300,     # null disables early stopping
        "max_steps": 1000,
        "exploring_starts": true,
        "reset_visits_on_xi_change": false,
        "discounted_risk": false     # grid world variant
      },
      "xi": {"step": 0.02, "max": 4.0},
      "evaluation": {"episodes": 3000, "test_episodes": 1000},
      "env": {                       # experiment specific
        "history": 2,                # tank-y-clc level history depth
        "centers": 200, "warmup_episodes": 300, "probe_states": 60,
        "hidden": 20,                # tank-y-olc net width
        "inflow": { ... }            # inflow model override (see
                                     # InflowModel.to_config)
      }
    }
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .evaluate import MdpPolicyEvaluator
from .experiments import (
    EXPERIMENTS,
    ExperimentConfig,
    InfeasibleProblem,
    default_config,
    oracle_check,
    run_experiment,
)
from .gridworld import GridEnv, GridSpec
from .learning import GreedyPolicy
from .mdp import ExplicitPolicy
from .nets import load_net
from .oracle import evaluate_policy, max_value_policy, min_risk_policy
from .plots import plot_weighted_difference
from .tank import simulate_policy_batch
from . import experiments as _exp

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="master RNG seed")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--omega", type=float, default=None, help="risk bound")
    parser.add_argument("--xi-step", type=float, default=None, help="weight increment")
    parser.add_argument("--xi-max", type=float, default=None, help="weight cap")
    parser.add_argument("--episodes", type=int, default=None,
                        help="episodes per fixed-weight phase")


def _build_config(args, experiment: str | None = None) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
        if experiment and cfg.experiment != experiment:
            raise ValueError(f"config is for {cfg.experiment!r}, expected {experiment!r}")
        base = default_config(cfg.experiment)
        for section in ("learning", "xi", "evaluation", "env"):
            merged = dict(getattr(base, section))
            merged.update(getattr(cfg, section))
            setattr(cfg, section, merged)
    else:
        if experiment is None:
            raise ValueError("sweep requires --config naming the experiment")
        cfg = default_config(experiment)
    # flags take precedence over config-file values
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.omega is not None:
        cfg.omega = args.omega
    if args.xi_step is not None:
        cfg.xi["step"] = args.xi_step
    if args.xi_max is not None:
        cfg.xi["max"] = args.xi_max
    if args.episodes is not None:
        cfg.learning["episodes_per_xi"] = args.episodes
    if getattr(args, "history", None) is not None:
        cfg.env["history"] = args.history
    return cfg


def _run_named(args, experiment: str) -> int:
    cfg = _build_config(args, experiment)
    out_dir = cfg.out
    try:
        result = run_experiment(cfg, out_dir)
    except InfeasibleProblem as exc:
        print(f"INFEASIBLE: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    ad = result.adaptation
    print(f"experiment: {cfg.experiment} (seed {cfg.seed}, config {cfg.config_hash})")
    print(f"stop weight: {ad.stop_xi if ad.stop_xi is not None else 'cap reached'}")
    rec = result.selected
    if rec is not None:
        print(f"selected: xi={rec.xi:g} risk={rec.risk:.4f} value={rec.value:.5f}")
    if cfg.experiment == "gridworld":
        print(f"oracle feasible: {result.oracle_feasible}; "
              f"aggregated value {result.aggregated_value:.4f}")
        rows, worst, passed = oracle_check(cfg, policy=result.policy, out_dir=out_dir,
                                           episodes_per_state=int(
                                               cfg.evaluation.get("episodes", 3000)))
        print(f"oracle check: worst risk gap {worst:.4f} ({'pass' if passed else 'FAIL'})")
    else:
        print(f"test risk {result.test_risk:.4f}, squared deviation {-result.test_value:.5f}")
    if getattr(args, "diff", None):
        _emit_difference(cfg, out_dir, args.diff)
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def _read_sweep_csv(path):
    xi, weighted = [], []
    with open(path) as fh:
        for row in csv.DictReader(r for r in fh if not r.startswith("#")):
            xi.append(float(row["xi"]))
            weighted.append(float(row["weighted"]))
    return xi, weighted


def _emit_difference(cfg, out_dir, baseline_csv) -> None:
    """Weighted-criterion difference between this run's sweep and a baseline
    sweep (history-augmentation study)."""
    xi_a, w_a = _read_sweep_csv(os.path.join(out_dir, "sweep.csv"))
    xi_b, w_b = _read_sweep_csv(baseline_csv)
    common = sorted(set(np.round(xi_a, 10)) & set(np.round(xi_b, 10)))
    amap = dict(zip(np.round(xi_a, 10), w_a))
    bmap = dict(zip(np.round(xi_b, 10), w_b))
    diff = [amap[x] - bmap[x] for x in common]
    lines = [f"# config={cfg.config_hash}", "xi,weighted_diff"]
    for x, d in zip(common, diff):
        lines.append(f"{x:.12g},{d:.12g}")
    path = os.path.join(out_dir, "weighted_diff.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    plot_weighted_difference(common, diff, os.path.join(out_dir, "weighted_diff.png"),
                             config_hash=cfg.config_hash)
    print(f"weighted-criterion difference written to {path}")


def _cmd_evaluate(args) -> int:
    cfg = _build_config(args, args.experiment)
    episodes = int(cfg.evaluation.get("test_episodes", 1000))
    out_dir = cfg.out
    os.makedirs(out_dir, exist_ok=True)
    if cfg.experiment == "gridworld":
        spec = GridSpec(omega=cfg.omega)
        env = GridEnv(spec)
        policy = _load_grid_policy(args.policy, spec, env, cfg)
        evaluator = MdpPolicyEvaluator(env.mdp, env.start, episodes_per_state=episodes,
                                       gamma=float(cfg.learning.get("gamma", 0.9)),
                                       seed=cfg.seed)
        pe = evaluator(policy)
        print(f"value {pe.value.mean:.5f} +- {pe.value.half_width:.5f}; "
              f"worst risk {pe.worst_risk.mean:.4f} at {pe.worst_state}")
        lines = [f"# config={cfg.config_hash}", "state,value,value_hw,risk,risk_hw"]
        for s, e in pe.per_state.items():
            lines.append(f"\"{env.mdp.labels[s]}\",{e.value.mean:.12g},"
                         f"{e.value.half_width:.12g},{e.risk.mean:.12g},"
                         f"{e.risk.half_width:.12g}")
        with open(os.path.join(out_dir, "evaluation.csv"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        params, model, enc, mode = _exp._tank_pieces(cfg)
        policy = _load_tank_policy(args.policy, enc, params)
        rng = np.random.default_rng(cfg.seed)
        ret, viol = simulate_policy_batch(params, model, policy, enc, mode,
                                          episodes, rng)
        print(f"value {ret.mean():.5f}; risk {viol.mean():.4f} "
              f"({episodes} episodes)")
        with open(os.path.join(out_dir, "evaluation.csv"), "w") as fh:
            fh.write(f"# config={cfg.config_hash}\n")
            fh.write("value,risk,episodes\n")
            fh.write(f"{ret.mean():.12g},{viol.mean():.12g},{episodes}\n")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def _load_grid_policy(path, spec, env, cfg):
    if path is None:
        policy, _ = min_risk_policy(env.mdp, gamma=float(cfg.learning.get("gamma", 0.9)))
        return policy
    actions = np.zeros(env.mdp.n_states, dtype=np.int64)
    with open(path) as fh:
        for row in csv.DictReader(r for r in fh if not r.startswith("#")):
            cell = (int(row["x"]), int(row["y"]))
            actions[env.mdp.index[cell]] = int(row["action"])
    return ExplicitPolicy(actions)


def _load_tank_policy(path, enc, params):
    if path is None:
        raise ValueError("tank evaluation needs --policy (run directory)")
    if os.path.isdir(path):
        meta = json.load(open(os.path.join(path, "policy.json")))
        q = load_net(os.path.join(path, "policy_q.npz"))
        qb = load_net(os.path.join(path, "policy_qbar.npz"))
        from .learning import NetDualQ

        dq = NetDualQ(q, qb, 0.0)
        return GreedyPolicy(dq, float(meta["xi"]), params.n_actions)
    raise ValueError("expected a run directory containing policy_q.npz")


def _cmd_oracle_check(args) -> int:
    cfg = _build_config(args, "gridworld")
    out_dir = cfg.out
    os.makedirs(out_dir, exist_ok=True)
    gamma = float(cfg.learning.get("gamma", 0.9))
    spec = GridSpec(omega=cfg.omega)
    env = GridEnv(spec)
    if args.policy == "max-value":
        policy, _ = max_value_policy(env.mdp, gamma=gamma)
    elif args.policy == "min-risk" or args.policy is None:
        policy, _ = min_risk_policy(env.mdp, gamma=gamma)
    else:
        policy = _load_grid_policy(args.policy, spec, env, cfg)
    episodes = args.episodes or int(cfg.evaluation.get("test_episodes", 10000))
    rows, worst, passed = oracle_check(cfg, policy=policy, out_dir=out_dir,
                                       episodes_per_state=episodes)
    offenders = [str(cell) for (cell, re_, rm, rg, ve, vm, vg) in rows
                 if re_ > cfg.omega]
    print(f"worst risk gap {worst:.4f} over {len(rows)} states "
          f"({'pass' if passed else 'FAIL'} at 0.02)")
    if offenders:
        print(f"states above the risk bound: {', '.join(sorted(offenders))}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK if passed else EXIT_ERROR


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="riskq",
        description="risk-constrained Q-learning experiments: weight sweeps, "
                    "policy selection, oracle checks, and report artifacts")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        _add_common(p)
        if name == "tank-y-clc":
            p.add_argument("--history", type=int, default=None,
                           help="depth of the level history in the state")
        if name.startswith("tank"):
            p.add_argument("--diff", default=None,
                           help="baseline sweep.csv to diff weighted criteria against")
        p.set_defaults(func=lambda a, n=name: _run_named(a, n))

    p = sub.add_parser("sweep", help="run a weight sweep described by a config file")
    _add_common(p)
    p.set_defaults(func=lambda a: _run_named(a, _peek_experiment(a)))

    p = sub.add_parser("evaluate", help="Monte-Carlo evaluation of a stored policy")
    _add_common(p)
    p.add_argument("--experiment", choices=EXPERIMENTS, default="gridworld")
    p.add_argument("--policy", default=None,
                   help="policy artifact (grid policy.csv or tank run directory); "
                        "defaults to the exact minimum-risk policy on the grid")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("oracle-check", help="per-state Monte-Carlo vs exact-solver gaps")
    _add_common(p)  # --episodes doubles as episodes per state here
    p.add_argument("--policy", default=None,
                   help="'min-risk' (default), 'max-value', or a policy.csv path")
    p.set_defaults(func=_cmd_oracle_check)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _peek_experiment(args) -> str:
    if not args.config:
        raise ValueError("sweep requires --config naming the experiment")
    with open(args.config) as fh:
        data = json.load(fh)
    if "experiment" not in data:
        raise ValueError("missing config field 'experiment'")
    return data["experiment"]


if __name__ == "__main__":
    sys.exit(main())
