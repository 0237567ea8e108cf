"""The learning algorithm: paired temporal-difference updates for a return
estimate Q and a risk estimate Qbar, greedy action selection under the
weighted ordering (weighted criterion first, plain value second, lowest
index last), learning at a fixed trade-off weight, and the outer loop that
raises the weight until the risk bound is about to be violated.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .mdp import (
    DUMMY_ACTION,
    ExplicitPolicy,
    GreedyPolicy,
    StateClass,
    TransitionSample,
)

__all__ = [
    "TabularDualQ",
    "NetDualQ",
    "LearningConfig",
    "XiSchedule",
    "SweepRecord",
    "XiAdaptationResult",
    "LearnDiagnostics",
    "greedy_action",
    "greedy_actions_batch",
    "td_update",
    "learn_fixed_xi",
    "adapt_xi",
    "select_xi",
    "dual_risk_tracking",
    "sweep_csv",
]


class TabularDualQ:
    """Dual action-value tables for the return (q) and the risk (q_bar).

    The weighted criterion ``xi * q - q_bar`` is always recomputed from the
    two tables, never stored.  Risk entries are clamped to [0, 1] after
    every update.  ``visits`` drives the per-pair learning-rate schedule.
    With ``track_undiscounted`` an auxiliary risk table is maintained with
    discount 1 alongside a discounted main risk table.
    """

    backend = "table"

    def __init__(self, n_states: int, n_actions: int, track_undiscounted: bool = False):
        self.q = np.zeros((n_states, n_actions))
        self.q_bar = np.zeros((n_states, n_actions))
        self.visits = np.zeros((n_states, n_actions), dtype=np.int64)
        self.q_bar_undiscounted = np.zeros((n_states, n_actions)) if track_undiscounted else None

    @property
    def n_states(self) -> int:
        return self.q.shape[0]

    @property
    def n_actions(self) -> int:
        return self.q.shape[1]

    def q_value(self, state, action: int) -> float:
        return float(self.q[state, action])

    def risk_value(self, state, action: int) -> float:
        return float(self.q_bar[state, action])

    def weighted(self, state, action: int, xi: float) -> float:
        return xi * float(self.q[state, action]) - float(self.q_bar[state, action])

    def update(self, state, action: int, q_target: float, qbar_target: float,
               alpha: float, qbar_undisc_target: float | None = None) -> None:
        self.q[state, action] += alpha * (q_target - self.q[state, action])
        self.q_bar[state, action] += alpha * (qbar_target - self.q_bar[state, action])
        self.q_bar[state, action] = min(1.0, max(0.0, self.q_bar[state, action]))
        if self.q_bar_undiscounted is not None and qbar_undisc_target is not None:
            v = self.q_bar_undiscounted[state, action]
            v += alpha * (qbar_undisc_target - v)
            self.q_bar_undiscounted[state, action] = min(1.0, max(0.0, v))
        self.visits[state, action] += 1

    def greedy_table(self, xi: float) -> np.ndarray:
        """Greedy action per state under the weighted ordering (vectorized)."""
        k1 = xi * self.q - self.q_bar
        best1 = k1.max(axis=1, keepdims=True)
        k2 = np.where(k1 == best1, self.q, -np.inf)
        return k2.argmax(axis=1)

    def copy(self) -> "TabularDualQ":
        out = TabularDualQ(self.n_states, self.n_actions,
                           track_undiscounted=self.q_bar_undiscounted is not None)
        out.q = self.q.copy()
        out.q_bar = self.q_bar.copy()
        out.visits = self.visits.copy()
        if self.q_bar_undiscounted is not None:
            out.q_bar_undiscounted = self.q_bar_undiscounted.copy()
        return out


class NetDualQ:
    """Dual function-approximator estimators (one regressor per signal).

    States are encoded input vectors; updates are single gradient steps
    toward the bootstrapped target (the direct method).  The learning rate
    is fixed per net rather than visit-scheduled.
    """

    backend = "net"

    def __init__(self, q_net, qbar_net, rate: float):
        self.q_net = q_net
        self.qbar_net = qbar_net
        self.rate = float(rate)

    def q_value(self, state, action: int) -> float:
        return float(self.q_net.predict(state, action))

    def risk_value(self, state, action: int) -> float:
        return float(self.qbar_net.predict(state, action))

    def weighted(self, state, action: int, xi: float) -> float:
        return xi * self.q_value(state, action) - self.risk_value(state, action)

    def all_values(self, state):
        """Q and risk vectors over all actions with one forward pass each."""
        x = np.asarray(state, dtype=float)
        return self.q_net.predict_all(x), self.qbar_net.predict_all(x)

    def update(self, state, action: int, q_target: float, qbar_target: float,
               alpha: float | None = None, qbar_undisc_target: float | None = None) -> None:
        rate = self.rate if alpha is None else alpha
        self.q_net.train_step(state, action, q_target, rate)
        self.qbar_net.train_step(state, action, qbar_target, rate)

    def copy(self) -> "NetDualQ":
        return NetDualQ(copy.deepcopy(self.q_net), copy.deepcopy(self.qbar_net), self.rate)


def _default_alpha(c: float = 10.0) -> Callable[[int], float]:
    return lambda n: c / (c + n)


@dataclass
class LearningConfig:
    """Knobs for a learning run.

    ``alpha_schedule`` maps the per-(state, action) visit count to a step
    size; it applies to tabular estimators (nets use their own fixed rate).
    Exploration decays linearly from ``epsilon_start`` to ``epsilon_end``
    over each fixed-weight phase.
    """

    gamma: float = 1.0
    gamma_bar: float = 1.0
    alpha_schedule: Callable[[int], float] = field(default_factory=_default_alpha)
    epsilon_start: float = 0.3
    epsilon_end: float = 0.01
    episodes_per_xi: int = 2000
    episodes_first_phase: int | None = None  # cold start usually needs more
    stability_window: int = 50
    max_steps: int = 1000
    seed: int = 0
    track_undiscounted_risk: bool = False
    # Resetting the step-size schedule on every weight change (each phase's
    # first update then fully replaces the warm-started estimate) trades
    # adaptivity for estimate variance; cumulative counts keep the warm
    # start's averaging and stabilize the sweep.
    reset_visits_on_xi_change: bool = True
    # Randomize the first action of every episode so that all state-action
    # pairs keep collecting samples; epsilon-greedy alone starves off-greedy
    # pairs whose risk differences are near the decision boundary.
    exploring_starts: bool = False
    # Net backends only: scale the gradient-step rate linearly from 1 down
    # to this floor across each phase so late-phase estimates settle.
    net_rate_floor: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gamma_bar <= 1.0):
            raise ValueError("discount factors must lie in [0, 1]")
        if not (0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0):
            raise ValueError("epsilon schedule must satisfy 0 <= end <= start <= 1")

    def epsilon(self, episode: int) -> float:
        if self.episodes_per_xi <= 1:
            return self.epsilon_end
        frac = min(1.0, episode / (self.episodes_per_xi - 1))
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass
class XiSchedule:
    """Outer-loop schedule: the weight starts at zero (the minimum-risk
    phase must come first) and grows by ``xi_step`` until the risk bound
    ``omega`` is violated or ``xi_max`` is reached.

    A violation is confirmed before stopping: the same phase is re-learned
    up to ``violation_retries`` times.  A spurious flip to a risky action
    puts that action on-policy, so extra episodes drive its risk estimate
    up to truth and the greedy choice reverts; a real violation survives
    the retries.
    """

    xi_step: float
    xi_max: float
    omega: float
    xi_start: float = 0.0
    violation_retries: int = 2
    # re-check candidate return policies with fresh evaluation draws and walk
    # back to an earlier weight if a borderline one fails the bound
    confirm_final: bool = True

    def __post_init__(self):
        if self.xi_start != 0.0:
            raise ValueError("the schedule must start at xi = 0")
        if self.xi_step <= 0:
            raise ValueError("xi_step must be positive")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if self.violation_retries < 0:
            raise ValueError("violation_retries must be nonnegative")


@dataclass
class SweepRecord:
    """Per-weight estimates recorded during the outer loop."""

    xi: float
    risk: float
    risk_hw: float
    value: float
    value_hw: float
    feasible: bool
    policy: object = None
    episodes: int = 0
    stable: bool = True

    @property
    def weighted(self) -> float:
        return self.xi * self.value - self.risk


@dataclass
class LearnDiagnostics:
    episodes: int
    stable: bool
    td_updates: int = 0


@dataclass
class XiAdaptationResult:
    """Outcome of the weight adaptation: the last feasible policy, the full
    sweep, the weight at which the bound was first violated (None if the cap
    was reached), and the minimum-risk estimate when already infeasible at
    weight zero."""

    feasible: bool
    policy: object
    records: list
    stop_xi: float | None
    min_risk_estimate: float

    @property
    def best_record(self) -> SweepRecord | None:
        feas = [r for r in self.records if r.feasible]
        return feas[-1] if feas else None


def greedy_action(dq, xi: float, state, n_actions: int) -> int:
    """Best action under the ordering: weighted criterion, then plain value,
    then lowest action index."""
    if hasattr(dq, "all_values"):
        q, qb = dq.all_values(state)
        return _lexi_argmax(xi * q[:n_actions] - qb[:n_actions], q[:n_actions])
    best, best_key = 0, None
    for a in range(n_actions):
        q = dq.q_value(state, a)
        key = (xi * q - dq.risk_value(state, a), q)
        if best_key is None or key > best_key:
            best, best_key = a, key
    return best


def _lexi_argmax(k1: np.ndarray, k2: np.ndarray) -> int:
    best1 = k1.max()
    k2m = np.where(k1 == best1, k2, -np.inf)
    return int(k2m.argmax())

def greedy_actions_batch(dq, xi: float, obs: np.ndarray, n_actions: int) -> np.ndarray:
    """Vectorized greedy selection for a batch of encoded states (net
    backends); ties resolve exactly as in :func:`greedy_action`."""
    q = dq.q_net.predict_many(obs)[:, :n_actions]
    qb = dq.qbar_net.predict_many(obs)[:, :n_actions]
    k1 = xi * q - qb
    best1 = k1.max(axis=1, keepdims=True)
    k2 = np.where(k1 == best1, q, -np.inf)
    return k2.argmax(axis=1)


def _bootstrap(dq, sample: TransitionSample, xi: float, n_actions: int):
    """Successor values for the TD targets.

    The sink bootstraps zero.  Error and goal successors bootstrap their
    defining values (return contribution zero; risk 1 and 0): they are
    terminal, so their continuation values are known rather than estimated.
    """
    if sample.terminal:
        return 0.0, 0.0
    if sample.next_class is StateClass.ERROR:
        return 0.0, 1.0
    if sample.next_class is StateClass.GOAL:
        return 0.0, 0.0
    if hasattr(dq, "all_values"):
        q, qb = dq.all_values(sample.next_state)
        u_star = _lexi_argmax(xi * q[:n_actions] - qb[:n_actions], q[:n_actions])
        return float(q[u_star]), float(qb[u_star])
    u_star = greedy_action(dq, xi, sample.next_state, n_actions)
    return dq.q_value(sample.next_state, u_star), dq.risk_value(sample.next_state, u_star)


def td_update(dq, sample: TransitionSample, xi: float, alpha: float,
              config: LearningConfig, n_actions: int | None = None) -> None:
    """One dual TD update.

    Both targets bootstrap through the same greedy successor action chosen
    under the weighted ordering; the update blends toward
    ``r + gamma * Q(x', u*)`` and ``rbar + gamma_bar * Qbar(x', u*)``.
    """
    if n_actions is None:
        n_actions = dq.n_actions
    boot_q, boot_qbar = _bootstrap(dq, sample, xi, n_actions)
    q_target = sample.reward + config.gamma * boot_q
    qbar_target = sample.risk_cost + config.gamma_bar * boot_qbar
    undisc_target = None
    if getattr(dq, "q_bar_undiscounted", None) is not None:
        if sample.terminal or sample.next_class is StateClass.GOAL:
            boot_u = 0.0
        elif sample.next_class is StateClass.ERROR:
            boot_u = 1.0
        else:
            u_star = greedy_action(dq, xi, sample.next_state, n_actions)
            boot_u = float(dq.q_bar_undiscounted[sample.next_state, u_star])
        undisc_target = sample.risk_cost + boot_u
    dq.update(sample.state, sample.action, q_target, qbar_target, alpha,
              qbar_undisc_target=undisc_target)


def _policy_snapshot(dq, xi: float, probe_states) -> tuple:
    if dq.backend == "table":
        return tuple(int(a) for a in dq.greedy_table(xi))
    n = dq.q_net.n_actions
    return tuple(greedy_actions_batch(dq, xi, np.asarray(probe_states, dtype=float), n).tolist())


def _extract_policy(dq, xi: float, n_actions: int):
    if dq.backend == "table":
        return ExplicitPolicy(dq.greedy_table(xi))
    return GreedyPolicy(dq.copy(), xi, n_actions)


def learn_fixed_xi(env, dq, xi: float, config: LearningConfig,
                   rng: np.random.Generator, probe_states: Sequence | None = None):
    """Run episodes with epsilon-greedy exploration at a fixed weight until
    the greedy policy holds still for ``stability_window`` episodes or the
    episode budget runs out.

    The estimator may be warm-started from a previous weight; visit counts
    reset here so the step size restarts at 1.  Returns the greedy policy
    (a frozen snapshot), the updated estimator, and diagnostics.
    """
    n_actions = env.n_actions
    if dq.backend == "table" and config.reset_visits_on_xi_change:
        dq.visits[:] = 0
    if probe_states is None and dq.backend == "net":
        raise ValueError("net-backed learning needs probe states for the stability test")

    last_snapshot = None
    stable_count = 0
    stable = False
    episodes_run = 0
    updates = 0
    for episode in range(config.episodes_per_xi):
        eps = config.epsilon(episode)
        net_rate = None
        if dq.backend == "net" and config.net_rate_floor < 1.0:
            frac = episode / max(config.episodes_per_xi - 1, 1)
            net_rate = dq.rate * (1.0 + frac * (config.net_rate_floor - 1.0))
        state, cls = env.reset(rng)
        first_choice = config.exploring_starts
        for _ in range(config.max_steps):
            if cls is StateClass.ABSORBING:
                break
            if cls is not StateClass.ORDINARY:
                ns, r, rbar, ncls = env.step(DUMMY_ACTION, rng)
                sample = TransitionSample(state, DUMMY_ACTION, ns, r, rbar,
                                          terminal=(ncls is StateClass.ABSORBING),
                                          next_class=ncls)
                if dq.backend == "table":
                    # keep terminal rows honest; nets never train on them
                    alpha = config.alpha_schedule(int(dq.visits[state, DUMMY_ACTION]))
                    td_update(dq, sample, xi, alpha, config, n_actions)
                    updates += 1
                state, cls = ns, ncls
                continue
            if first_choice or rng.random() < eps:
                a = int(rng.integers(n_actions))
                first_choice = False
            else:
                a = greedy_action(dq, xi, state, n_actions)
            ns, r, rbar, ncls = env.step(a, rng)
            sample = TransitionSample(state, a, ns, r, rbar,
                                      terminal=(ncls is StateClass.ABSORBING),
                                      next_class=ncls)
            if dq.backend == "table":
                alpha = config.alpha_schedule(int(dq.visits[state, a]))
            else:
                alpha = net_rate
            td_update(dq, sample, xi, alpha, config, n_actions)
            updates += 1
            state, cls = ns, ncls
        episodes_run += 1
        snapshot = _policy_snapshot(dq, xi, probe_states)
        if snapshot == last_snapshot:
            stable_count += 1
            if stable_count >= config.stability_window:
                stable = True
                break
        else:
            stable_count = 0
        last_snapshot = snapshot

    policy = _extract_policy(dq, xi, n_actions)
    return policy, dq, LearnDiagnostics(episodes=episodes_run, stable=stable,
                                        td_updates=updates)


def adapt_xi(env, schedule: XiSchedule, config: LearningConfig, evaluator,
             rng: np.random.Generator, dq, probe_states: Sequence | None = None,
             on_record: Callable | None = None) -> XiAdaptationResult:
    """Weight adaptation: learn at weight zero, then raise the weight step
    by step (warm-starting the estimator) until the evaluated risk of some
    start state exceeds the bound.

    ``evaluator`` maps a frozen policy to a
    :class:`riskq.evaluate.PolicyEvaluation`; its worst-state risk (point
    estimate) decides feasibility.  If the bound is already violated at
    weight zero the problem is reported infeasible together with the
    minimum achievable risk estimate.
    """
    records: list[SweepRecord] = []
    best_policy = None
    stop_xi: float | None = None
    xi = 0.0
    step_index = 0
    while True:
        cfg = config
        if step_index == 0 and config.episodes_first_phase is not None:
            cfg = replace(config, episodes_per_xi=config.episodes_first_phase)
        policy, dq, diag = learn_fixed_xi(env, dq, xi, cfg, rng, probe_states)
        ev = evaluator(policy)
        feasible = ev.worst_risk.mean <= schedule.omega
        episodes_spent = diag.episodes
        for _ in range(schedule.violation_retries):
            if feasible:
                break
            policy, dq, diag = learn_fixed_xi(env, dq, xi, config, rng, probe_states)
            ev = evaluator(policy)
            feasible = ev.worst_risk.mean <= schedule.omega
            episodes_spent += diag.episodes
        rec = SweepRecord(xi=xi, risk=ev.worst_risk.mean, risk_hw=ev.worst_risk.half_width,
                          value=ev.value.mean, value_hw=ev.value.half_width,
                          feasible=feasible, policy=policy,
                          episodes=episodes_spent, stable=diag.stable)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if not feasible:
            if step_index == 0:
                return XiAdaptationResult(feasible=False, policy=policy, records=records,
                                          stop_xi=0.0, min_risk_estimate=ev.worst_risk.mean)
            stop_xi = xi
            break
        best_policy = policy
        if xi >= schedule.xi_max:
            break
        step_index += 1
        xi = round(step_index * schedule.xi_step, 12)
        if xi > schedule.xi_max:
            xi = schedule.xi_max
    feas = [r for r in records if r.feasible]
    if schedule.confirm_final:
        best_policy = None
        for rec in reversed(feas):
            check = evaluator(rec.policy)
            if check.worst_risk.mean <= schedule.omega:
                best_policy = rec.policy
                break
            rec.feasible = False
        if best_policy is None:
            worst = evaluator(feas[0].policy).worst_risk.mean
            return XiAdaptationResult(feasible=False, policy=feas[0].policy,
                                      records=records, stop_xi=0.0,
                                      min_risk_estimate=worst)
    return XiAdaptationResult(feasible=True, policy=best_policy, records=records,
                              stop_xi=stop_xi, min_risk_estimate=feas[0].risk)


def select_xi(records: Sequence[SweepRecord], omega: float) -> SweepRecord | None:
    """Pick the sweep record with the best value among those whose risk
    estimate respects the bound; ties go to the larger weight.  Returns
    None when no record qualifies."""
    eligible = [r for r in records if r.risk <= omega]
    if not eligible:
        return None
    return max(eligible, key=lambda r: (r.value, r.xi))


def dual_risk_tracking(env, config: LearningConfig, rng: np.random.Generator,
                       n_states: int, xi: float = 0.0,
                       probe_states: Sequence | None = None):
    """Learn with a discounted risk while tracking the undiscounted risk in
    an auxiliary table; requires a tabular setting and a risk discount below
    one (matching the value discount)."""
    if config.gamma_bar >= 1.0:
        raise ValueError("dual risk tracking needs gamma_bar < 1")
    cfg = replace(config, track_undiscounted_risk=True)
    dq = TabularDualQ(n_states, env.n_actions, track_undiscounted=True)
    policy, dq, diag = learn_fixed_xi(env, dq, xi, cfg, rng, probe_states)
    return policy, dq, diag


def sweep_csv(records: Sequence[SweepRecord], header_comment: str | None = None) -> str:
    """Sweep export: one row per weight with estimates and feasibility."""
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    lines.append("xi,risk,risk_hw,value,value_hw,weighted,feasible")
    for r in records:
        lines.append(f"{r.xi:.12g},{r.risk:.12g},{r.risk_hw:.12g},{r.value:.12g},"
                     f"{r.value_hw:.12g},{r.weighted:.12g},{int(r.feasible)}")
    return "\n".join(lines) + "\n"
