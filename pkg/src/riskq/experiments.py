"""Experiment orchestration: named, config-driven reproduction runs that
train a learner, sweep the trade-off weight, select a policy for the risk
budget, and emit artifacts (CSV data, policy renders, figures, oracle
cross-checks), all seeded end to end."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import plots
from .evaluate import (
    Estimate,
    MdpPolicyEvaluator,
    PolicyEvaluation,
    risk_estimate,
    value_estimate,
)
from .gridworld import GridEnv, GridSpec, render_policy, risk_csv
from .learning import (
    LearningConfig,
    NetDualQ,
    TabularDualQ,
    XiSchedule,
    adapt_xi,
    select_xi,
    sweep_csv,
)
from .mdp import StartDistribution, StateClass
from .nets import MlpNet, RbfNet, TimeIndexedNet, place_rbf_centers, save_net
from .oracle import (
    aggregate_value,
    evaluate_policy,
    evaluation_csv,
    feasibility,
    max_value_policy,
    min_risk_policy,
)
from .tank import (
    EncodingKind,
    InflowModel,
    OpenLoopPolicy,
    StateEncoding,
    TankEnv,
    TankParams,
    episode_log_csv,
    open_loop_vector,
    simulate_policy_batch,
)

__all__ = [
    "ExperimentConfig",
    "default_config",
    "run_experiment",
    "run_gridworld",
    "run_tank",
    "oracle_check",
    "build_tank_learner",
    "TankEvaluator",
    "InfeasibleProblem",
    "EXPERIMENTS",
]

EXPERIMENTS = ("gridworld", "tank-y-clc", "tank-y-olc", "tank-yc-clc")


class InfeasibleProblem(RuntimeError):
    """The risk bound cannot be met even by the minimum-risk policy."""

    def __init__(self, min_risk: float):
        super().__init__(f"infeasible: minimum achievable risk estimate {min_risk:.4g}")
        self.min_risk = min_risk


@dataclass
class ExperimentConfig:
    """Fully serializable run description; archived next to the outputs."""

    experiment: str
    seed: int = 1
    out: str = "runs/out"
    omega: float = 0.13
    learning: dict = field(default_factory=dict)
    xi: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; "
                             f"choose one of {', '.join(EXPERIMENTS)}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")

    def to_json(self) -> str:
        payload = {
            "experiment": self.experiment, "seed": self.seed, "out": self.out,
            "omega": self.omega, "learning": self.learning, "xi": self.xi,
            "evaluation": self.evaluation, "env": self.env,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {"experiment", "seed", "out", "omega", "learning", "xi",
                 "evaluation", "env"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config field {sorted(unknown)[0]!r}")
        if "experiment" not in data:
            raise ValueError("missing config field 'experiment'")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


_DEFAULTS = {
    "gridworld": {
        "omega": 0.13,
        "learning": {
            "gamma": 0.9, "gamma_bar": 1.0, "alpha_c": 1.0,
            "epsilon_start": 0.3, "epsilon_end": 0.1,
            "episodes_per_xi": 2500, "episodes_first_phase": 25000,
            "stability_window": None, "max_steps": 1000,
            "exploring_starts": True, "reset_visits_on_xi_change": False,
            "discounted_risk": False,
        },
        "xi": {"step": 0.02, "max": 4.0},
        "evaluation": {"episodes": 3000, "test_episodes": 10000},
        "env": {},
    },
    "tank-y-clc": {
        "omega": 0.2,
        "learning": {
            "gamma": 1.0, "gamma_bar": 1.0, "net_rate": 0.15,
            "epsilon_start": 0.3, "epsilon_end": 0.01,
            "episodes_per_xi": 1000, "episodes_first_phase": 4000,
            "stability_window": None, "max_steps": 100,
            "exploring_starts": True,
        },
        "xi": {"step": 0.25, "max": 30.0},
        "evaluation": {"episodes": 3000, "test_episodes": 1000},
        "env": {"history": 0, "centers": 200, "warmup_episodes": 300,
                "probe_states": 60},
    },
    "tank-y-olc": {
        "omega": 0.1,
        "learning": {
            "gamma": 1.0, "gamma_bar": 1.0, "net_rate": 0.01,
            "epsilon_start": 0.3, "epsilon_end": 0.01,
            "episodes_per_xi": 1500, "episodes_first_phase": 6000,
            "stability_window": None, "max_steps": 100,
            "exploring_starts": True,
        },
        "xi": {"step": 0.25, "max": 30.0},
        "evaluation": {"episodes": 3000, "test_episodes": 1000},
        "env": {"hidden": 20},
    },
    "tank-yc-clc": {
        "omega": 0.2,
        "learning": {
            "gamma": 1.0, "gamma_bar": 1.0, "net_rate": 0.15,
            "epsilon_start": 0.3, "epsilon_end": 0.01,
            "episodes_per_xi": 1200, "episodes_first_phase": 5000,
            "stability_window": None, "max_steps": 100,
            "exploring_starts": True,
        },
        "xi": {"step": 0.25, "max": 30.0},
        "evaluation": {"episodes": 3000, "test_episodes": 1000},
        "env": {"centers": 300, "warmup_episodes": 400, "probe_states": 60,
                "inflow": None},
    },
}


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    if experiment not in _DEFAULTS:
        raise ValueError(f"unknown experiment {experiment!r}")
    base = copy.deepcopy(_DEFAULTS[experiment])
    cfg = ExperimentConfig(experiment=experiment, omega=base["omega"],
                           learning=base["learning"], xi=base["xi"],
                           evaluation=base["evaluation"], env=base["env"])
    for key, val in overrides.items():
        if val is None:
            continue
        if key in ("learning", "xi", "evaluation", "env"):
            getattr(cfg, key).update(val)
        else:
            setattr(cfg, key, val)
    return cfg


def _learning_config(cfg: ExperimentConfig, seed: int) -> LearningConfig:
    ln = cfg.learning
    c = float(ln.get("alpha_c", 1.0))
    window = ln.get("stability_window")
    return LearningConfig(
        gamma=float(ln.get("gamma", 1.0)),
        gamma_bar=float(ln.get("gamma_bar", 1.0)),
        alpha_schedule=lambda n, c=c: c / (c + n),
        epsilon_start=float(ln.get("epsilon_start", 0.3)),
        epsilon_end=float(ln.get("epsilon_end", 0.01)),
        episodes_per_xi=int(ln.get("episodes_per_xi", 2000)),
        episodes_first_phase=(None if ln.get("episodes_first_phase") is None
                              else int(ln["episodes_first_phase"])),
        stability_window=int(window) if window else 10 ** 9,
        max_steps=int(ln.get("max_steps", 1000)),
        seed=seed,
        track_undiscounted_risk=bool(ln.get("discounted_risk", False)),
        reset_visits_on_xi_change=bool(ln.get("reset_visits_on_xi_change", False)),
        exploring_starts=bool(ln.get("exploring_starts", True)),
    )


def _write(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# grid world
# ---------------------------------------------------------------------------

@dataclass
class GridRunResult:
    config: ExperimentConfig
    adaptation: object
    selected: object
    policy: object
    oracle_eval: object
    oracle_feasible: bool
    aggregated_value: float


def run_gridworld(cfg: ExperimentConfig, out_dir=None) -> GridRunResult:
    spec = GridSpec(omega=cfg.omega, **cfg.env.get("grid", {}))
    env = GridEnv(spec)
    mdp = env.mdp
    start = env.start
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    rng = np.random.default_rng(seeds[0])
    lcfg = _learning_config(cfg, cfg.seed)
    if bool(cfg.learning.get("discounted_risk", False)):
        lcfg.gamma_bar = lcfg.gamma
    sched = XiSchedule(xi_step=float(cfg.xi.get("step", 0.02)),
                       xi_max=float(cfg.xi.get("max", 4.0)), omega=cfg.omega)
    evaluator = MdpPolicyEvaluator(mdp, start,
                                   episodes_per_state=int(cfg.evaluation.get("episodes", 3000)),
                                   gamma=lcfg.gamma,
                                   seed=int(seeds[1].generate_state(1)[0]))
    dq = TabularDualQ(mdp.n_states, env.n_actions,
                      track_undiscounted=lcfg.track_undiscounted_risk)
    result = adapt_xi(env, sched, lcfg, evaluator, rng, dq)
    if not result.feasible:
        _emit_grid_artifacts(cfg, out_dir, spec, mdp, start, result, None, None)
        raise InfeasibleProblem(result.min_risk_estimate)

    policy = result.policy
    oracle_eval = evaluate_policy(mdp, policy, gamma=lcfg.gamma, gamma_bar=lcfg.gamma_bar)
    report = feasibility(oracle_eval, start, cfg.omega)
    selected = select_xi(result.records, cfg.omega)
    vbar = aggregate_value(oracle_eval, start)
    run = GridRunResult(cfg, result, selected, policy, oracle_eval,
                        report.feasible, vbar)
    _emit_grid_artifacts(cfg, out_dir, spec, mdp, start, result, policy, oracle_eval)
    return run


def _emit_grid_artifacts(cfg, out_dir, spec, mdp, start, result, policy, oracle_eval):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    h = cfg.config_hash
    _write(os.path.join(out_dir, "config.json"), cfg.to_json())
    _write(os.path.join(out_dir, "sweep.csv"), sweep_csv(result.records, f"config={h}"))
    plots.plot_sweep(result.records, os.path.join(out_dir, "sweep.png"),
                     omega=cfg.omega, config_hash=h)
    summary = {
        "feasible": result.feasible,
        "stop_xi": result.stop_xi,
        "min_risk_estimate": result.min_risk_estimate,
        "config": h,
    }
    if not result.feasible:
        _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2))
        return
    rec = result.best_record
    summary.update({"selected_xi": rec.xi, "selected_risk": rec.risk,
                    "selected_value": rec.value})
    _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2))

    risks = {c: float(oracle_eval.risks[mdp.index[c]]) for c in spec.cells()}
    _write(os.path.join(out_dir, "policy.txt"),
           render_policy(spec, policy, risks, cfg.omega) + "\n")
    lines = [f"# config={h}", "x,y,action"]
    for cell in spec.cells():
        a = policy.action(mdp.index[cell])
        lines.append(f"{cell[0]},{cell[1]},{a}")
    _write(os.path.join(out_dir, "policy.csv"), "\n".join(lines) + "\n")
    _write(os.path.join(out_dir, "cell_risk.csv"), f"# config={h}\n" + risk_csv(spec, risks))
    _write(os.path.join(out_dir, "oracle_eval.csv"),
           f"# config={h}\n" + evaluation_csv(oracle_eval))
    plots.plot_grid_policy(spec, policy, risks, os.path.join(out_dir, "policy.png"),
                           omega=cfg.omega, title="final policy", config_hash=h)


def oracle_check(cfg: ExperimentConfig, policy=None, out_dir=None,
                 episodes_per_state: int | None = None):
    """Per-state gap table between Monte-Carlo estimates and the exact
    solver for a policy on the grid world (defaults to the exact
    minimum-risk policy when none is given)."""
    if cfg.experiment != "gridworld":
        raise ValueError("oracle checks need a finite environment")
    spec = GridSpec(omega=cfg.omega, **cfg.env.get("grid", {}))
    env = GridEnv(spec)
    mdp = env.mdp
    gamma = float(cfg.learning.get("gamma", 0.9))
    if policy is None:
        policy, _ = min_risk_policy(mdp, gamma=gamma)
    exact = evaluate_policy(mdp, policy, gamma=gamma)
    episodes = episodes_per_state or int(cfg.evaluation.get("test_episodes", 10000))
    evaluator = MdpPolicyEvaluator(mdp, env.start, episodes_per_state=episodes,
                                   gamma=gamma, seed=cfg.seed + 99)
    mc = evaluator(policy)
    rows = []
    worst_risk_gap = 0.0
    for s, pe in mc.per_state.items():
        cell = mdp.labels[s]
        risk_gap = abs(pe.risk.mean - float(exact.risks[s]))
        value_gap = abs(pe.value.mean - float(exact.values[s]))
        worst_risk_gap = max(worst_risk_gap, risk_gap)
        rows.append((cell, float(exact.risks[s]), pe.risk.mean, risk_gap,
                     float(exact.values[s]), pe.value.mean, value_gap))
    passed = worst_risk_gap < 0.02
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        lines = [f"# config={cfg.config_hash}",
                 "state,risk_exact,risk_mc,risk_gap,value_exact,value_mc,value_gap"]
        for (cell, re_, rm, rg, ve, vm, vg) in rows:
            lines.append(f"\"{cell}\",{re_:.12g},{rm:.12g},{rg:.12g},"
                         f"{ve:.12g},{vm:.12g},{vg:.12g}")
        lines.append(f"# worst_risk_gap={worst_risk_gap:.12g} pass={passed}")
        _write(os.path.join(out_dir, "oracle_check.csv"), "\n".join(lines) + "\n")
    return rows, worst_risk_gap, passed


# ---------------------------------------------------------------------------
# feed tank
# ---------------------------------------------------------------------------

class TankEvaluator:
    """Batched start-state evaluator for tank policies."""

    def __init__(self, params, model, encoding, mode, episodes, seed):
        self.params = params
        self.model = model
        self.encoding = encoding
        self.mode = mode
        self.episodes = int(episodes)
        self._rng = np.random.default_rng(seed)

    def __call__(self, policy) -> PolicyEvaluation:
        ret, viol = simulate_policy_batch(self.params, self.model, policy,
                                          self.encoding, self.mode,
                                          self.episodes, self._rng)
        val = value_estimate(ret)
        rsk = risk_estimate(int(viol.sum()), len(viol))
        return PolicyEvaluation(value=val, risk=rsk, worst_risk=rsk, worst_state="x0")


def _tank_pieces(cfg: ExperimentConfig):
    params = TankParams(**cfg.env.get("params", {}))
    inflow_cfg = cfg.env.get("inflow")
    model = InflowModel.from_config(inflow_cfg) if inflow_cfg else InflowModel()
    if cfg.experiment == "tank-y-clc":
        hist = int(cfg.env.get("history", 0))
        enc = StateEncoding(EncodingKind.CLC_Y_HIST, hist) if hist else \
            StateEncoding(EncodingKind.CLC_Y)
        mode = "y"
    elif cfg.experiment == "tank-y-olc":
        enc = StateEncoding(EncodingKind.OLC)
        mode = "y"
    else:
        enc = StateEncoding(EncodingKind.CLC_YC)
        mode = "yc"
    return params, model, enc, mode


def _input_scaling(enc: StateEncoding, params: TankParams):
    """Offset/scale mapping observation entries onto the plant's ranges."""
    if enc.kind in (EncodingKind.CLC_Y, EncodingKind.CLC_Y_HIST):
        d = enc.dim(params)
        offset = np.concatenate([[0.0], np.full(d - 1, params.y_min)])
        scale = np.concatenate([[params.n_steps],
                                np.full(d - 1, params.y_max - params.y_min)])
        if enc.kind is EncodingKind.CLC_Y_HIST:
            offset[2:] = 0.0  # history slots are zero padded at the start
            scale[2:] = params.y_max
        return offset, scale
    if enc.kind is EncodingKind.CLC_YC:
        offset = np.array([0.0, params.y_min, params.c1_bounds[0], params.c2_bounds[0]])
        scale = np.array([params.n_steps, params.y_max - params.y_min,
                          params.c1_bounds[1] - params.c1_bounds[0],
                          params.c2_bounds[1] - params.c2_bounds[0]])
        return offset, scale
    d = enc.dim(params)
    offset = np.concatenate([[0.0], np.zeros(d - 1)])
    scale = np.concatenate([[params.n_steps], np.full(d - 1, params.f_max)])
    return offset, scale


def build_tank_learner(cfg: ExperimentConfig, rng: np.random.Generator):
    """Environment, dual estimator, and probe states for a tank experiment.

    Closed-loop variants place RBF centers by k-means over warm-up episodes
    driven by random actions; the open-loop variant builds one pair of MLPs
    per horizon step.
    """
    params, model, enc, mode = _tank_pieces(cfg)
    env = TankEnv(params, model, enc, mode=mode)
    rate = float(cfg.learning.get("net_rate", 0.15))
    offset, scale = _input_scaling(enc, params)

    if enc.kind is EncodingKind.OLC:
        hidden = int(cfg.env.get("hidden", 20))
        d = enc.dim(params)
        q_nets = [MlpNet(d, params.n_actions, hidden=hidden, rng=rng,
                         offset=offset, scale=scale) for _ in range(params.n_steps)]
        qb_nets = [MlpNet(d, params.n_actions, hidden=hidden, rng=rng,
                          offset=offset, scale=scale) for _ in range(params.n_steps)]
        dq = NetDualQ(TimeIndexedNet(q_nets), TimeIndexedNet(qb_nets), rate)
        probe = [np.zeros(d)]
        for t in range(1, params.n_steps):
            x = np.zeros(d)
            x[0] = t
            x[1: 1 + t] = params.f_spec
            probe.append(x)
        return env, dq, np.array(probe), params, model, enc, mode

    warmup = int(cfg.env.get("warmup_episodes", 300))
    samples = []
    for _ in range(warmup):
        obs, cls = env.reset(rng)
        while cls is StateClass.ORDINARY:
            samples.append(obs)
            obs, _, _, cls = env.step(int(rng.integers(params.n_actions)), rng)
    samples = np.asarray(samples)
    scaled = (samples - offset) / scale
    centers, widths = place_rbf_centers(scaled, int(cfg.env.get("centers", 200)), rng)
    q_net = RbfNet(centers, widths, params.n_actions, offset=offset, scale=scale)
    qb_net = RbfNet(centers, widths, params.n_actions, offset=offset, scale=scale)
    dq = NetDualQ(q_net, qb_net, rate)
    probe = samples[rng.choice(len(samples), int(cfg.env.get("probe_states", 60)),
                               replace=False)]
    return env, dq, probe, params, model, enc, mode


@dataclass
class TankRunResult:
    config: ExperimentConfig
    adaptation: object
    selected: object
    test_risk: float
    test_value: float
    params: object
    encoding: object
    mode: str


def run_tank(cfg: ExperimentConfig, out_dir=None) -> TankRunResult:
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng = np.random.default_rng(seeds[0])
    env, dq, probe, params, model, enc, mode = build_tank_learner(cfg, rng)
    lcfg = _learning_config(cfg, cfg.seed)
    sched = XiSchedule(xi_step=float(cfg.xi.get("step", 0.25)),
                       xi_max=float(cfg.xi.get("max", 30.0)), omega=cfg.omega)
    evaluator = TankEvaluator(params, model, enc, mode,
                              int(cfg.evaluation.get("episodes", 3000)),
                              int(seeds[1].generate_state(1)[0]))
    result = adapt_xi(env, sched, lcfg, evaluator, rng, dq, probe_states=probe)
    if not result.feasible:
        _emit_tank_artifacts(cfg, out_dir, params, model, enc, mode, result, None, None)
        raise InfeasibleProblem(result.min_risk_estimate)
    selected = select_xi(result.records, cfg.omega)
    test_rng = np.random.default_rng(seeds[2])
    ret, viol = simulate_policy_batch(params, model, selected.policy, enc, mode,
                                      int(cfg.evaluation.get("test_episodes", 1000)),
                                      test_rng)
    run = TankRunResult(cfg, result, selected, float(viol.mean()), float(ret.mean()),
                        params, enc, mode)
    _emit_tank_artifacts(cfg, out_dir, params, model, enc, mode, result, selected, run)
    return run


def _emit_tank_artifacts(cfg, out_dir, params, model, enc, mode, result, selected, run):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    h = cfg.config_hash
    _write(os.path.join(out_dir, "config.json"), cfg.to_json())
    model.save(os.path.join(out_dir, "inflow_model.json"))
    _write(os.path.join(out_dir, "sweep.csv"), sweep_csv(result.records, f"config={h}"))
    plots.plot_sweep(result.records, os.path.join(out_dir, "sweep.png"),
                     omega=cfg.omega, config_hash=h)
    summary = {"feasible": result.feasible, "stop_xi": result.stop_xi,
               "min_risk_estimate": result.min_risk_estimate, "config": h}
    if selected is None:
        _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2))
        return
    summary.update({
        "selected_xi": selected.xi,
        "selected_risk": selected.risk,
        "selected_value": selected.value,
        "test_risk": run.test_risk,
        "test_value": run.test_value,
        "squared_deviation": -run.test_value,
    })
    _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2))

    env = TankEnv(params, model, enc, mode=mode)
    log_rng = np.random.default_rng(cfg.seed + 4242)
    logs = []
    all_rows = []
    for i in range(10):
        obs, cls = env.reset(log_rng)
        while cls is not StateClass.ABSORBING:
            a = 0 if cls is not StateClass.ORDINARY else selected.policy.action(obs)
            obs, _, _, cls = env.step(a, log_rng)
        logs.append(list(env.last_rows))
        for row in env.last_rows:
            all_rows.append((i,) + row)
    lines = [f"# config={h}", "run,t,f_total,f,y,c1,c2,r,violated"]
    for (i, t, ft, f, y, c1, c2, r, bad) in all_rows:
        lines.append(f"{i},{t},{ft:.12g},{f:.12g},{y:.12g},{c1:.12g},{c2:.12g},"
                     f"{r:.12g},{int(bad)}")
    _write(os.path.join(out_dir, "episode_log.csv"), "\n".join(lines) + "\n")
    plots.plot_tank_runs(logs, params, os.path.join(out_dir, "runs.png"),
                         show_concentration=(mode == "yc"), config_hash=h)

    if enc.kind is EncodingKind.OLC:
        idx = open_loop_vector(selected.policy, enc, params)
        flows = params.action_values()[idx]
        lines = [f"# config={h}", "t,action_index,flow"]
        for t, (a, f) in enumerate(zip(idx, flows)):
            lines.append(f"{t},{a},{f:.12g}")
        _write(os.path.join(out_dir, "controls.csv"), "\n".join(lines) + "\n")
        plots.plot_open_loop_controls(flows, params,
                                      os.path.join(out_dir, "controls.png"),
                                      config_hash=h)
    else:
        save_net(selected.policy.dq.q_net, os.path.join(out_dir, "policy_q.npz"))
        save_net(selected.policy.dq.qbar_net, os.path.join(out_dir, "policy_qbar.npz"))
        _write(os.path.join(out_dir, "policy.json"), json.dumps(
            {"xi": selected.xi, "encoding": enc.kind.value, "history": enc.history,
             "config": h}, indent=2))


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Dispatch a named experiment; returns the run result object."""
    if cfg.experiment == "gridworld":
        return run_gridworld(cfg, out_dir)
    return run_tank(cfg, out_dir)
