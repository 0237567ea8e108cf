"""Feed-tank plant: level and concentration dynamics driven by correlated
random inflows, chance-constraint checking (bound violations become error
states), the quadratic outflow-deviation reward, and the state encodings for
closed-loop, history-augmented, and open-loop control.

The tank sits upstream of a separation column; the controller picks the
outflow rate at each of N steps so it stays near a specified set point while
the level (and, in the full problem, the two substance concentrations)
remain inside their bands with high probability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .mdp import DUMMY_ACTION, StateClass

__all__ = [
    "TankParams",
    "InflowModel",
    "InflowDraw",
    "TankState",
    "EncodingKind",
    "StateEncoding",
    "TankEnv",
    "tank_step",
    "encode",
    "sample_inflows",
    "simulate_policy_batch",
    "OpenLoopPolicy",
    "open_loop_vector",
    "episode_log_csv",
]

_MEAN_INFLOW = (1.8, 1.8, 1.5, 1.5, 0.7, 0.7, 0.5, 0.3,
                0.2, 0.2, 0.2, 0.2, 0.2, 0.6, 1.2, 1.2)


@dataclass(frozen=True)
class TankParams:
    """Plant constants.

    The action grid is anchored at the set point so that ``f_spec`` is an
    exact grid value; the episode horizon is ``n_steps`` control moves with
    bound checks on every state from step 1 through ``n_steps``.
    """

    n_steps: int = 16
    y0: float = 0.4
    y_min: float = 0.25
    y_max: float = 0.75
    area_dt: float = 0.1  # inverse footprint times the step length
    f_spec: float = 0.8
    f_min: float = 0.55
    f_max: float = 1.05
    n_actions: int = 21
    c0: tuple = (0.2, 0.8)
    c1_bounds: tuple = (0.1, 0.4)
    c2_bounds: tuple = (0.6, 0.9)

    def __post_init__(self):
        if not (self.y_min < self.y0 < self.y_max):
            raise ValueError("initial level must lie inside the level band")
        grid = self.action_values()
        if not np.isclose(grid, self.f_spec).any():
            raise ValueError("the action grid must contain f_spec exactly")

    def action_values(self) -> np.ndarray:
        """Evenly spaced outflow grid containing ``f_spec`` exactly."""
        step = (self.f_max - self.f_min) / (self.n_actions - 1)
        k = round((self.f_spec - self.f_min) / step)
        return self.f_spec + (np.arange(self.n_actions) - k) * step

    def reward(self, flow: float) -> float:
        return -((flow - self.f_spec) ** 2)


@dataclass
class InflowModel:
    """Random inflow generator.

    The cumulative inflow over the horizon is multivariate Gaussian with the
    given per-step means, a common standard deviation, and correlations that
    decay linearly with the step distance.  Inflow substance concentrations
    are bimodal: a per-episode mode shifts every step's Gaussian mean up or
    down by ``conc_delta``, and the two substance fractions of each inflow
    sum to one exactly.
    """

    mu: np.ndarray = field(default_factory=lambda: np.array(_MEAN_INFLOW))
    sigma: float = 0.05
    corr_slope: float = 0.05
    conc_mu: np.ndarray = field(default_factory=lambda: np.full(16, 0.25))
    conc_delta: float = 0.04
    conc_sigma: float = 0.05
    n_inflows: int = 2

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.conc_mu = np.asarray(self.conc_mu, dtype=float)
        n = len(self.mu)
        lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
        self.cov = (self.sigma ** 2) * (1.0 - self.corr_slope * lag)
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("inflow covariance is not positive definite") from exc

    @property
    def n_steps(self) -> int:
        return len(self.mu)

    def sample_flows(self, rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal((size, self.n_steps))
        return self.mu + z @ self._chol.T

    def sample_concentrations(self, rng: np.random.Generator, size: int):
        """Per-episode mode plus per-inflow substance-1 fractions.

        Returns ``(modes, conc)`` with ``conc[m, j, i, t]`` the substance-i
        fraction of inflow j at step t for episode m.
        """
        modes = rng.integers(0, 2, size=size)
        shift = np.where(modes == 0, self.conc_delta, -self.conc_delta)
        c1 = (self.conc_mu[None, None, :]
              + shift[:, None, None]
              + self.conc_sigma * rng.standard_normal((size, self.n_inflows, self.n_steps)))
        conc = np.stack([c1, 1.0 - c1], axis=2)
        return modes, conc

    def to_config(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma,
            "correlation": {"rule": "linear", "slope": self.corr_slope},
            "bimodal": {
                "mu": self.conc_mu.tolist(),
                "delta": self.conc_delta,
                "sigma": self.conc_sigma,
            },
            "n_inflows": self.n_inflows,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "InflowModel":
        return cls(
            mu=np.asarray(cfg["mu"], dtype=float),
            sigma=float(cfg["sigma"]),
            corr_slope=float(cfg["correlation"]["slope"]),
            conc_mu=np.asarray(cfg["bimodal"]["mu"], dtype=float),
            conc_delta=float(cfg["bimodal"]["delta"]),
            conc_sigma=float(cfg["bimodal"]["sigma"]),
            n_inflows=int(cfg.get("n_inflows", 2)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_config(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "InflowModel":
        with open(path) as fh:
            return cls.from_config(json.load(fh))


@dataclass
class InflowDraw:
    """One episode's realized randomness: total inflow per step, the equal
    per-inflow split, the inflow concentration table, and the mode."""

    f_total: np.ndarray
    f_inflows: np.ndarray   # (n_inflows, n_steps)
    conc: np.ndarray        # (n_inflows, 2 substances, n_steps)
    mode: int


def sample_inflows(model: InflowModel, rng: np.random.Generator) -> InflowDraw:
    """Draw one episode's inflow rates and concentrations."""
    f_total = model.sample_flows(rng, 1)[0]
    modes, conc = model.sample_concentrations(rng, 1)
    split = np.tile(f_total / model.n_inflows, (model.n_inflows, 1))
    return InflowDraw(f_total=f_total, f_inflows=split, conc=conc[0], mode=int(modes[0]))


@dataclass(frozen=True)
class TankState:
    """Plant state: step index, level, and the two tank concentrations."""

    t: int
    y: float
    c1: float
    c2: float


class EncodingKind(Enum):
    CLC_Y = "clc-y"            # (t, y)
    CLC_Y_HIST = "clc-y-hist"  # (t, y(t), y(t-1), ..., y(t-k)) zero padded
    CLC_YC = "clc-yc"          # (t, y, c1, c2)
    OLC = "olc"                # (t, u(t-1), ..., u(0)) zero padded


@dataclass(frozen=True)
class StateEncoding:
    """Observation layout fed to the function approximator."""

    kind: EncodingKind
    history: int = 0

    def dim(self, params: TankParams) -> int:
        if self.kind is EncodingKind.CLC_Y:
            return 2
        if self.kind is EncodingKind.CLC_Y_HIST:
            return 2 + self.history
        if self.kind is EncodingKind.CLC_YC:
            return 4
        return params.n_steps  # OLC: t plus n_steps - 1 action slots


def encode(state: TankState, encoding: StateEncoding, params: TankParams,
           y_history=(), action_history=()) -> np.ndarray:
    """Observation vector for a plant state.

    Histories run newest first and are zero padded at the episode start;
    the open-loop layout carries the action values actually applied.
    """
    t = float(state.t)
    if encoding.kind is EncodingKind.CLC_Y:
        return np.array([t, state.y])
    if encoding.kind is EncodingKind.CLC_Y_HIST:
        out = np.zeros(2 + encoding.history)
        out[0] = t
        out[1] = state.y
        past = list(y_history)[: encoding.history]
        out[2: 2 + len(past)] = past
        return out
    if encoding.kind is EncodingKind.CLC_YC:
        return np.array([t, state.y, state.c1, state.c2])
    out = np.zeros(params.n_steps)
    out[0] = t
    past = list(action_history)[: params.n_steps - 1]
    out[1: 1 + len(past)] = past
    return out


def tank_step(state: TankState, flow: float, draw: InflowDraw, params: TankParams,
              check_concentrations: bool):
    """One plant transition under a chosen outflow.

    The level integrates the inflow/outflow imbalance; in the full problem
    the tank concentrations are pulled toward each inflow's concentrations
    at a rate scaled by the inflow rates and diluted by the level.  Bound
    violations at the new step make the successor an error state.
    Returns ``(next_state, reward, next_class)``.
    """
    t = state.t
    if t >= params.n_steps:
        raise ValueError("episode past its horizon")
    y_new = state.y + params.area_dt * (float(draw.f_total[t]) - flow)
    if check_concentrations:
        if state.y <= 0.0:
            raise ValueError("level must stay positive for the concentration update")
        scale = params.area_dt / state.y
        c1_new = state.c1 + scale * float(
            (draw.f_inflows[:, t] * (draw.conc[:, 0, t] - state.c1)).sum())
        c2_new = state.c2 + scale * float(
            (draw.f_inflows[:, t] * (draw.conc[:, 1, t] - state.c2)).sum())
    else:
        c1_new, c2_new = state.c1, state.c2
    nxt = TankState(t + 1, y_new, c1_new, c2_new)
    reward = params.reward(flow)

    violated = not (params.y_min <= y_new <= params.y_max)
    if check_concentrations and not violated:
        violated = not (params.c1_bounds[0] <= c1_new <= params.c1_bounds[1]
                        and params.c2_bounds[0] <= c2_new <= params.c2_bounds[1])
    if violated:
        cls = StateClass.ERROR
    elif nxt.t == params.n_steps:
        cls = StateClass.GOAL
    else:
        cls = StateClass.ORDINARY
    return nxt, reward, cls


class TankEnv:
    """Episodic simulator around the plant.

    ``mode`` is ``"y"`` (level constraints only, cumulative inflow) or
    ``"yc"`` (level and concentration constraints, split inflows).  States
    handed to policies are the encoded observation vectors; entering an
    error or goal state is followed by a dummy transition to the sink, at
    which point the risk cost is emitted.
    """

    def __init__(self, params: TankParams, model: InflowModel,
                 encoding: StateEncoding, mode: str = "y"):
        if mode not in ("y", "yc"):
            raise ValueError("mode must be 'y' or 'yc'")
        if model.n_steps != params.n_steps:
            raise ValueError("inflow model horizon must match the plant horizon")
        self.params = params
        self.model = model
        self.encoding = encoding
        self.mode = mode
        self.action_values = params.action_values()
        self._draw: InflowDraw | None = None
        self._state: TankState | None = None
        self._cls = StateClass.ORDINARY
        self._y_hist: list = []
        self._a_hist: list = []
        self.last_rows: list = []  # per-step log of the current episode

    @property
    def n_actions(self) -> int:
        return self.params.n_actions

    def state_label(self, obs):
        return np.array2string(np.asarray(obs), precision=6, separator=" ")

    def observe(self) -> np.ndarray:
        return encode(self._state, self.encoding, self.params,
                      y_history=self._y_hist, action_history=self._a_hist)

    def reset(self, rng: np.random.Generator):
        self._draw = sample_inflows(self.model, rng)
        self._state = TankState(0, self.params.y0, *self.params.c0)
        self._cls = StateClass.ORDINARY
        self._y_hist = []
        self._a_hist = []
        self.last_rows = []
        return self.observe(), self._cls

    def step(self, action: int, rng: np.random.Generator):
        if self._cls is StateClass.ABSORBING:
            raise RuntimeError("episode already finished")
        if self._cls is not StateClass.ORDINARY:
            # terminal plant state: dummy move into the sink
            rbar = 1.0 if self._cls is StateClass.ERROR else 0.0
            self._cls = StateClass.ABSORBING
            return self.observe(), 0.0, rbar, self._cls
        flow = float(self.action_values[action])
        state = self._state
        nxt, reward, cls = tank_step(state, flow, self._draw, self.params,
                                     check_concentrations=(self.mode == "yc"))
        self.last_rows.append((state.t, float(self._draw.f_total[state.t]), flow,
                               state.y, state.c1, state.c2, reward,
                               cls is StateClass.ERROR))
        self._y_hist.insert(0, state.y)
        self._a_hist.insert(0, flow)
        self._state = nxt
        self._cls = cls
        return self.observe(), reward, 0.0, cls


class OpenLoopPolicy:
    """Fixed action-index vector: the result of open-loop learning."""

    kind = "open-loop"

    def __init__(self, action_indices):
        self.indices = np.asarray(action_indices, dtype=np.int64)

    def action(self, obs) -> int:
        t = int(round(float(np.asarray(obs).ravel()[0])))
        return int(self.indices[t])


def open_loop_vector(policy, encoding: StateEncoding, params: TankParams) -> np.ndarray:
    """Unroll a greedy open-loop policy into its fixed action-index vector.

    Open-loop observations depend only on time and the agent's own past
    actions, so the greedy action sequence is deterministic.
    """
    values = params.action_values()
    a_hist: list = []
    idx = []
    for t in range(params.n_steps):
        obs = encode(TankState(t, params.y0, *params.c0), encoding, params,
                     action_history=a_hist)
        a = policy.action(obs)
        idx.append(a)
        a_hist.insert(0, float(values[a]))
    return np.asarray(idx, dtype=np.int64)


def _batch_encode(encoding: StateEncoding, params: TankParams, t: int,
                  y: np.ndarray, c1: np.ndarray, c2: np.ndarray,
                  y_hist: np.ndarray | None, a_hist: np.ndarray | None) -> np.ndarray:
    m = y.shape[0]
    if encoding.kind is EncodingKind.CLC_Y:
        return np.column_stack([np.full(m, float(t)), y])
    if encoding.kind is EncodingKind.CLC_Y_HIST:
        out = np.zeros((m, 2 + encoding.history))
        out[:, 0] = t
        out[:, 1] = y
        k = min(encoding.history, y_hist.shape[1])
        out[:, 2: 2 + k] = y_hist[:, :k]
        return out
    if encoding.kind is EncodingKind.CLC_YC:
        return np.column_stack([np.full(m, float(t)), y, c1, c2])
    out = np.zeros((m, params.n_steps))
    out[:, 0] = t
    k = min(params.n_steps - 1, a_hist.shape[1])
    out[:, 1: 1 + k] = a_hist[:, :k]
    return out


def simulate_policy_batch(params: TankParams, model: InflowModel, policy,
                          encoding: StateEncoding, mode: str, episodes: int,
                          rng: np.random.Generator):
    """Vectorized Monte-Carlo rollout of a frozen policy.

    All episodes advance in lockstep; violated episodes stop accumulating
    reward (their remaining steps contribute nothing, matching the episodic
    termination on entering an error state).  Returns
    ``(returns, violations)`` arrays.
    """
    check_c = mode == "yc"
    values = params.action_values()
    flows = model.sample_flows(rng, episodes)
    if check_c:
        _, conc = model.sample_concentrations(rng, episodes)
        split = flows / model.n_inflows
    y = np.full(episodes, params.y0)
    c1 = np.full(episodes, params.c0[0])
    c2 = np.full(episodes, params.c0[1])
    alive = np.ones(episodes, dtype=bool)
    violated = np.zeros(episodes, dtype=bool)
    ret = np.zeros(episodes)
    hist_depth = encoding.history if encoding.kind is EncodingKind.CLC_Y_HIST else 0
    y_hist = np.zeros((episodes, max(hist_depth, 1)))
    a_hist = np.zeros((episodes, params.n_steps - 1)) if encoding.kind is EncodingKind.OLC else None

    for t in range(params.n_steps):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        obs = _batch_encode(encoding, params, t, y[idx], c1[idx], c2[idx],
                            y_hist[idx] if hist_depth else None,
                            a_hist[idx] if a_hist is not None else None)
        if hasattr(policy, "batch_actions"):
            acts = np.asarray(policy.batch_actions(obs), dtype=np.int64)
        elif isinstance(policy, OpenLoopPolicy):
            acts = np.full(idx.size, int(policy.indices[t]), dtype=np.int64)
        else:
            acts = np.array([policy.action(o) for o in obs], dtype=np.int64)
        f = values[acts]
        ret[idx] += params.reward(f)

        if hist_depth:
            y_hist[idx, 1:] = y_hist[idx, :-1]
            y_hist[idx, 0] = y[idx]
        if a_hist is not None:
            a_hist[idx, 1:] = a_hist[idx, :-1]
            a_hist[idx, 0] = f

        y_new = y[idx] + params.area_dt * (flows[idx, t] - f)
        bad = (y_new < params.y_min) | (y_new > params.y_max)
        if check_c:
            scale = params.area_dt / y[idx]
            d1 = (split[idx, t][:, None] * (conc[idx, :, 0, t] - c1[idx, None])).sum(axis=1)
            d2 = (split[idx, t][:, None] * (conc[idx, :, 1, t] - c2[idx, None])).sum(axis=1)
            c1_new = c1[idx] + scale * d1
            c2_new = c2[idx] + scale * d2
            bad |= ((c1_new < params.c1_bounds[0]) | (c1_new > params.c1_bounds[1])
                    | (c2_new < params.c2_bounds[0]) | (c2_new > params.c2_bounds[1]))
            c1[idx] = c1_new
            c2[idx] = c2_new
        y[idx] = y_new
        violated[idx[bad]] = True
        alive[idx[bad]] = False
    return ret, violated


def episode_log_csv(rows, header_comment: str | None = None) -> str:
    """Per-step episode log: t, total inflow, outflow, level, concentrations,
    reward, and whether the step violated a constraint."""
    out = []
    if header_comment:
        out.append(f"# {header_comment}")
    out.append("t,f_total,f,y,c1,c2,r,violated")
    for (t, ft, f, y, c1, c2, r, bad) in rows:
        out.append(f"{t},{ft:.12g},{f:.12g},{y:.12g},{c1:.12g},{c2:.12g},{r:.12g},{int(bad)}")
    return "\n".join(out) + "\n"
