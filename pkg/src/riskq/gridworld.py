"""Stochastic grid-world benchmark: a 6x6 grid whose left column and bottom
row are error states, with two goal cells, slip noise, and a discounted goal
reward.  Exposed both as a step simulator and as an explicit finite MDP so
exact dynamic programming can cross-check every learner result.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    FiniteMdp,
    StateClass,
    StartDistribution,
    augment_with_eta,
    classify_states,
)

__all__ = ["GridSpec", "GridEnv", "grid_step", "as_finite_mdp",
           "render_policy", "risk_csv", "ACTION_NAMES"]

# action indices: right, left, up, down
ACTION_NAMES = (">", "<", "^", "v")
_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))


def _paper_error_cells() -> frozenset:
    col = {(1, y) for y in range(1, 7)}
    row = {(x, 1) for x in range(2, 7)}
    return frozenset(col | row)


@dataclass(frozen=True)
class GridSpec:
    """Grid instance constants.  Defaults are the benchmark instance:
    6x6 cells, 11 error cells along x=1 and y=1, goals at (2,2) and (6,6),
    total slip probability 0.21, goal reward 1, discount 0.9, risk bound 0.13.
    """

    width: int = 6
    height: int = 6
    error_cells: frozenset = field(default_factory=_paper_error_cells)
    goal_cells: frozenset = frozenset({(2, 2), (6, 6)})
    slip_total: float = 0.21
    goal_reward: float = 1.0
    gamma: float = 0.9
    omega: float = 0.13

    def __post_init__(self):
        if self.error_cells & self.goal_cells:
            raise ValueError("error and goal cells overlap")
        for (x, y) in self.error_cells | self.goal_cells:
            if not (1 <= x <= self.width and 1 <= y <= self.height):
                raise ValueError(f"cell {(x, y)} outside the grid")
        if not 0.0 <= self.slip_total < 1.0:
            raise ValueError("slip_total must be in [0, 1)")

    def cells(self) -> list:
        """All cells in a fixed deterministic order (x major, y minor)."""
        return [(x, y) for x in range(1, self.width + 1) for y in range(1, self.height + 1)]

    def cell_class(self, cell) -> StateClass:
        if cell in self.error_cells:
            return StateClass.ERROR
        if cell in self.goal_cells:
            return StateClass.GOAL
        return StateClass.ORDINARY

    def move(self, cell, direction: int):
        """Apply a movement, staying in place when blocked by the boundary."""
        dx, dy = _MOVES[direction]
        nx, ny = cell[0] + dx, cell[1] + dy
        if 1 <= nx <= self.width and 1 <= ny <= self.height:
            return (nx, ny)
        return cell

    def direction_probs(self, action: int) -> np.ndarray:
        """Probability of actually moving in each direction given the action."""
        p = np.full(4, self.slip_total / 3.0)
        p[action] = 1.0 - self.slip_total
        return p


def grid_step(spec: GridSpec, cell, action: int, rng: np.random.Generator):
    """One stochastic step from an ordinary cell.

    The intended direction is taken with probability ``1 - slip_total``;
    otherwise one of the three remaining directions is taken uniformly.
    Returns ``(next_cell, reward, next_class)``.
    """
    if spec.cell_class(cell) is not StateClass.ORDINARY:
        raise ValueError(f"grid_step requires an ordinary cell, got {cell}")
    u = rng.random()
    probs = spec.direction_probs(action)
    direction = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    direction = min(direction, 3)
    nxt = spec.move(cell, direction)
    ncls = spec.cell_class(nxt)
    reward = spec.goal_reward if ncls is StateClass.GOAL else 0.0
    return nxt, reward, ncls


def as_finite_mdp(spec: GridSpec) -> FiniteMdp:
    """Analytic transition kernel of the grid, augmented with the sink.

    The kernel matches :func:`grid_step` exactly: slip mass is split
    uniformly over the three unintended directions and blocked moves stay
    in place (masses merge when several directions hit the same cell).
    """
    cells = spec.cells()
    n = len(cells)
    idx = {c: i for i, c in enumerate(cells)}
    error = [idx[c] for c in cells if c in spec.error_cells]
    goal = [idx[c] for c in cells if c in spec.goal_cells]
    classes = classify_states(n, error, goal)

    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4, n))
    counts = np.zeros(n, dtype=np.int64)
    for c in cells:
        s = idx[c]
        if classes[s] != StateClass.ORDINARY:
            continue  # terminal rows are written by augment_with_eta
        counts[s] = 4
        for a in range(4):
            probs = spec.direction_probs(a)
            for d in range(4):
                nxt = spec.move(c, d)
                P[s, a, idx[nxt]] += probs[d]
        for ns in range(n):
            if classes[ns] == StateClass.GOAL:
                R[s, :, ns] = spec.goal_reward
    base = FiniteMdp(labels=list(cells), P=P, R=R, RBAR=np.zeros_like(P),
                     classes=classes, action_counts=counts)
    return augment_with_eta(base)


class GridEnv:
    """Native step simulator over the grid, sharing the MDP's state indexing.

    States are indices into ``as_finite_mdp(spec).labels``; the default start
    distribution is uniform over all non-error grid cells.
    """

    def __init__(self, spec: GridSpec, start: StartDistribution | None = None):
        self.spec = spec
        self.mdp = as_finite_mdp(spec)
        self.eta = self.mdp.eta
        if start is None:
            xprime = [self.mdp.index[c] for c in spec.cells()
                      if spec.cell_class(c) is not StateClass.ERROR]
            start = StartDistribution.uniform(xprime)
        self.start = start
        self._state: int | None = None

    @property
    def n_actions(self) -> int:
        return 4

    def state_label(self, state: int):
        return self.mdp.labels[state]

    def start_states(self) -> list:
        return list(self.start.states)

    def reset(self, rng: np.random.Generator):
        s = int(self.start.sample(rng))
        self._state = s
        return s, self.mdp.state_class(s)

    def step(self, action: int, rng: np.random.Generator):
        s = self._state
        cls = self.mdp.state_class(s)
        if cls is not StateClass.ORDINARY:
            # terminal cell: dummy transition into the sink
            rbar = 1.0 if cls is StateClass.ERROR else 0.0
            self._state = self.eta
            return self.eta, 0.0, rbar, StateClass.ABSORBING
        cell = self.mdp.labels[s]
        nxt, reward, ncls = grid_step(self.spec, cell, action, rng)
        ns = self.mdp.index[nxt]
        self._state = ns
        return ns, reward, 0.0, ncls


def render_policy(spec: GridSpec, policy, risks: dict | None = None,
                  omega: float | None = None) -> str:
    """Text rendering of a policy: one row per y from top to bottom, with
    E/G marking terminal cells and ``*`` flagging cells whose risk exceeds
    the bound."""
    mdp_index = {c: i for i, c in enumerate(spec.cells())}
    lines = []
    for y in range(spec.height, 0, -1):
        row = []
        for x in range(1, spec.width + 1):
            cell = (x, y)
            cls = spec.cell_class(cell)
            if cls is StateClass.ERROR:
                tok = "E"
            elif cls is StateClass.GOAL:
                tok = "G"
            else:
                tok = ACTION_NAMES[policy.action(mdp_index[cell])]
            if risks is not None and omega is not None and cls is not StateClass.ERROR:
                if risks.get(cell, 0.0) > omega:
                    tok += "*"
            row.append(f"{tok:<2}")
        lines.append(" ".join(row))
    return "\n".join(lines)


def risk_csv(spec: GridSpec, risks: dict) -> str:
    """Per-cell risk table: columns x, y, class, risk."""
    buf = io.StringIO()
    buf.write("x,y,class,risk\n")
    for cell in spec.cells():
        cls = spec.cell_class(cell).name.lower()
        buf.write(f"{cell[0]},{cell[1]},{cls},{risks[cell]:.12g}\n")
    return buf.getvalue()
