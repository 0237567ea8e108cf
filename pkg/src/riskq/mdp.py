"""Episodic MDP core: error/goal classification, the dual reward/risk-cost
signal, finite transition models, episode simulation, and policies.

The central construction: terminal states are split into *error* states
(entering one is the undesirable event) and benign *goal* states.  A single
absorbing sink is appended after all terminals; the unit risk cost is emitted
on the error-to-sink transition, so the undiscounted sum of risk costs along
an episode is a Bernoulli indicator of "an error state was reached".
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Hashable, Sequence

import numpy as np

__all__ = [
    "StateClass",
    "TransitionSample",
    "EpisodeTrace",
    "StartDistribution",
    "FiniteMdp",
    "FiniteMdpEnv",
    "ExplicitPolicy",
    "GreedyPolicy",
    "augment_with_eta",
    "classify_states",
    "run_episode",
    "trace_to_csv",
]

DUMMY_ACTION = 0  # the single action available in terminal states


class StateClass(IntEnum):
    """Role of a state in the episodic structure."""

    ORDINARY = 0
    ERROR = 1       # terminal; entering one is the risk event
    GOAL = 2        # terminal; benign
    ABSORBING = 3   # technical sink appended after all terminals


@dataclass(frozen=True)
class TransitionSample:
    """One observed transition, carrying both reward signals.

    ``risk_cost`` is 1 exactly on the error-to-sink transition and 0
    everywhere else; ``reward`` is in problem units.
    """

    state: Hashable
    action: int
    next_state: Hashable
    reward: float
    risk_cost: float
    terminal: bool
    next_class: StateClass = StateClass.ORDINARY


@dataclass
class EpisodeTrace:
    """A full episode: ordered transitions plus the two episode returns."""

    start: Hashable
    steps: list[TransitionSample]
    return_value: float
    risk_return: float
    truncated: bool = False

    def validate(self) -> None:
        """Assert the Bernoulli structure of the risk return.

        The risk return is exactly 0 or 1, at most one step carries a unit
        risk cost, and if one does it is the final recorded step.
        """
        if self.risk_return not in (0.0, 1.0):
            raise AssertionError(f"risk_return {self.risk_return} is not 0 or 1")
        hot = [i for i, s in enumerate(self.steps) if s.risk_cost != 0.0]
        if len(hot) > 1:
            raise AssertionError(f"{len(hot)} steps carry a risk cost; at most one allowed")
        if hot:
            i = hot[0]
            if self.steps[i].risk_cost != 1.0:
                raise AssertionError("risk cost must be exactly 1 when present")
            if i != len(self.steps) - 1:
                raise AssertionError("the unit risk cost must be on the final step")
        if bool(hot) != (self.risk_return == 1.0):
            raise AssertionError("risk_return inconsistent with recorded risk costs")


@dataclass(frozen=True)
class StartDistribution:
    """Distribution over start states: parallel lists of states and weights."""

    states: tuple
    probs: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if len(self.states) != len(p):
            raise ValueError("states and probs must have equal length")
        if (p < 0).any():
            raise ValueError("start probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"start probabilities sum to {p.sum()!r}, not 1")

    @classmethod
    def uniform(cls, states: Sequence) -> "StartDistribution":
        n = len(states)
        return cls(tuple(states), tuple([1.0 / n] * n))

    @classmethod
    def point(cls, state) -> "StartDistribution":
        return cls((state,), (1.0,))

    def sample(self, rng: np.random.Generator):
        i = rng.choice(len(self.states), p=np.asarray(self.probs))
        return self.states[int(i)]


def classify_states(n_states: int, error: Sequence[int], goal: Sequence[int]) -> np.ndarray:
    """Build a per-state class array, rejecting overlapping error/goal sets."""
    overlap = set(error) & set(goal)
    if overlap:
        raise ValueError(f"error and goal sets overlap: {sorted(overlap)}")
    classes = np.full(n_states, StateClass.ORDINARY, dtype=np.int64)
    classes[list(error)] = StateClass.ERROR
    classes[list(goal)] = StateClass.GOAL
    return classes


@dataclass
class FiniteMdp:
    """Enumerable MDP with dense kernel and the dual reward signals.

    ``P[s, a, s']`` is the transition probability, ``R`` the reward and
    ``RBAR`` the risk cost attached to the transition.  ``action_counts[s]``
    gives the number of valid actions at ``s`` (actions are ``0..k-1``);
    states awaiting augmentation may have zero actions.  ``eta`` is the index
    of the absorbing sink once :func:`augment_with_eta` has run.
    """

    labels: list
    P: np.ndarray
    R: np.ndarray
    RBAR: np.ndarray
    classes: np.ndarray
    action_counts: np.ndarray
    eta: int | None = None
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {lab: i for i, lab in enumerate(self.labels)}

    @property
    def n_states(self) -> int:
        return len(self.labels)

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def actions(self, s: int) -> range:
        return range(int(self.action_counts[s]))

    def state_class(self, s: int) -> StateClass:
        return StateClass(int(self.classes[s]))

    def validate(self, atol: float = 1e-12) -> None:
        if self.eta is None:
            raise ValueError("MDP not augmented: no absorbing sink")
        if int((self.classes == StateClass.ABSORBING).sum()) != 1:
            raise ValueError("exactly one absorbing sink is required")
        for s in range(self.n_states):
            k = int(self.action_counts[s])
            if k < 1:
                raise ValueError(f"state {self.labels[s]} has no actions")
            rows = self.P[s, :k].sum(axis=1)
            if np.abs(rows - 1.0).max() > atol:
                raise ValueError(f"transition rows of state {self.labels[s]} do not sum to 1")

    def canonical_actions(self, actions: np.ndarray) -> np.ndarray:
        """Clamp a policy's action choices to the valid action sets.

        Policies are only meaningful on ordinary states; terminal states
        always take their single dummy action (mirroring the simulator).
        An out-of-range action on an ordinary state is a caller bug.
        """
        actions = np.asarray(actions, dtype=np.int64)
        ordinary = self.classes == StateClass.ORDINARY
        bad = ordinary & (actions >= self.action_counts)
        if bad.any():
            s = int(np.flatnonzero(bad)[0])
            raise ValueError(f"invalid action {actions[s]} at state {self.labels[s]}")
        return np.where(ordinary, actions, DUMMY_ACTION)

    def policy_kernel(self, actions: np.ndarray):
        """Row-select the kernel under a deterministic policy.

        Returns ``(P_pi, r_pi, rbar_pi)`` where the reward vectors are the
        expected one-step reward / risk cost under the policy.
        """
        actions = self.canonical_actions(actions)
        idx = np.arange(self.n_states)
        P_pi = self.P[idx, actions]
        r_pi = (P_pi * self.R[idx, actions]).sum(axis=1)
        rbar_pi = (P_pi * self.RBAR[idx, actions]).sum(axis=1)
        return P_pi, r_pi, rbar_pi


def augment_with_eta(mdp: FiniteMdp, eta_label="eta") -> FiniteMdp:
    """Append the absorbing sink and reroute all terminal states into it.

    Every error/goal state gets a single dummy action leading to the sink
    with probability 1; the risk cost is 1 on error-to-sink transitions and
    0 otherwise.  The sink self-loops with zero reward and zero risk cost.
    """
    if mdp.eta is not None:
        raise ValueError("MDP already has an absorbing sink")
    if eta_label in mdp.index:
        raise ValueError(f"label {eta_label!r} already in use")
    S, A = mdp.n_states, max(mdp.n_actions, 1)
    n = S + 1
    eta = S
    P = np.zeros((n, A, n))
    R = np.zeros((n, A, n))
    RBAR = np.zeros((n, A, n))
    P[:S, : mdp.n_actions, :S] = mdp.P
    R[:S, : mdp.n_actions, :S] = mdp.R
    RBAR[:S, : mdp.n_actions, :S] = mdp.RBAR
    classes = np.concatenate([mdp.classes, [StateClass.ABSORBING]])
    counts = mdp.action_counts.copy()
    for s in range(S):
        cls = StateClass(int(classes[s]))
        if cls in (StateClass.ERROR, StateClass.GOAL):
            P[s] = 0.0
            R[s] = 0.0
            RBAR[s] = 0.0
            P[s, DUMMY_ACTION, eta] = 1.0
            RBAR[s, DUMMY_ACTION, eta] = 1.0 if cls is StateClass.ERROR else 0.0
            counts[s] = 1
    P[eta, DUMMY_ACTION, eta] = 1.0
    counts = np.concatenate([counts, [1]])
    out = FiniteMdp(
        labels=list(mdp.labels) + [eta_label],
        P=P,
        R=R,
        RBAR=RBAR,
        classes=classes,
        action_counts=counts,
        eta=eta,
    )
    out.validate()
    return out


class ExplicitPolicy:
    """Stationary deterministic policy as an explicit state-to-action map."""

    kind = "explicit"

    def __init__(self, actions, label: str = "explicit"):
        self._map = dict(actions) if isinstance(actions, dict) else None
        self._arr = None if self._map is not None else np.asarray(actions, dtype=np.int64)
        self.label = label

    def action(self, state) -> int:
        if self._map is not None:
            return int(self._map[state])
        return int(self._arr[state])

    def as_array(self, n_states: int | None = None) -> np.ndarray:
        if self._arr is not None:
            return self._arr.copy()
        arr = np.zeros(n_states, dtype=np.int64)
        for s, a in self._map.items():
            arr[s] = a
        return arr


class GreedyPolicy:
    """Policy derived from a dual estimator: greedy under the weighted
    ordering at a fixed trade-off weight.  The estimator is treated as a
    frozen snapshot; callers who keep training must pass a copy."""

    kind = "greedy"

    def __init__(self, dq, xi: float, n_actions: int):
        self.dq = dq
        self.xi = float(xi)
        self.n_actions = int(n_actions)

    def action(self, state) -> int:
        from .learning import greedy_action

        return greedy_action(self.dq, self.xi, state, self.n_actions)

    def batch_actions(self, obs: np.ndarray) -> np.ndarray:
        from .learning import greedy_actions_batch

        return greedy_actions_batch(self.dq, self.xi, obs, self.n_actions)


class FiniteMdpEnv:
    """Simulation wrapper around an augmented :class:`FiniteMdp`.

    States are integer indices into ``mdp.labels``.  Terminal states step to
    the sink through their dummy action regardless of the action passed in.
    """

    def __init__(self, mdp: FiniteMdp, start: StartDistribution):
        mdp.validate()
        self.mdp = mdp
        self.start = start
        self._state: int | None = None
        self._cum = np.cumsum(mdp.P, axis=2)

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def state_label(self, state: int):
        return self.mdp.labels[state]

    def reset(self, rng: np.random.Generator):
        s = int(self.start.sample(rng))
        self._state = s
        return s, self.mdp.state_class(s)

    def step(self, action: int, rng: np.random.Generator):
        s = self._state
        cls = self.mdp.state_class(s)
        if cls is not StateClass.ORDINARY:
            action = DUMMY_ACTION
        if action not in self.mdp.actions(s):
            raise ValueError(f"action {action} invalid in state {self.mdp.labels[s]}")
        u = rng.random()
        ns = int(np.searchsorted(self._cum[s, action], u, side="right"))
        ns = min(ns, self.mdp.n_states - 1)
        r = float(self.mdp.R[s, action, ns])
        rbar = float(self.mdp.RBAR[s, action, ns])
        self._state = ns
        return ns, r, rbar, self.mdp.state_class(ns)


def run_episode(env, policy, rng: np.random.Generator, max_steps: int = 1000,
                gamma: float = 1.0) -> EpisodeTrace:
    """Simulate one episode and return its validated trace.

    The trace ends on arrival at the absorbing sink or after ``max_steps``
    transitions, whichever comes first; truncated episodes are flagged and
    count a risk return of 0.  ``return_value`` discounts rewards by
    ``gamma`` per step; the risk return is undiscounted.
    """
    state, cls = env.reset(rng)
    start = state
    steps: list[TransitionSample] = []
    ret = 0.0
    risk = 0.0
    disc = 1.0
    for _ in range(max_steps):
        if cls is StateClass.ABSORBING:
            break
        a = DUMMY_ACTION if cls is not StateClass.ORDINARY else policy.action(state)
        ns, r, rbar, ncls = env.step(a, rng)
        steps.append(TransitionSample(state, a, ns, r, rbar,
                                      terminal=(ncls is StateClass.ABSORBING),
                                      next_class=ncls))
        ret += disc * r
        disc *= gamma
        risk += rbar
        state, cls = ns, ncls
    trace = EpisodeTrace(start=start, steps=steps, return_value=ret,
                         risk_return=risk, truncated=(cls is not StateClass.ABSORBING))
    trace.validate()
    return trace


def trace_to_csv(trace: EpisodeTrace, label_fn: Callable = str) -> str:
    """Debug dump of a trace: columns step, state, action, next_state, r, rbar."""
    buf = io.StringIO()
    buf.write("step,state,action,next_state,r,rbar\n")
    for i, s in enumerate(trace.steps):
        buf.write(f"{i},{label_fn(s.state)},{s.action},{label_fn(s.next_state)},"
                  f"{s.reward:.12g},{s.risk_cost:.12g}\n")
    return buf.getvalue()
