"""Exact dynamic programming on finite MDPs: policy value and risk, optimal
weighted/minimum-risk/maximum-value policies, and feasibility checks.  Used
as ground truth when verifying the learner.

Policy evaluation solves the coupled fixed-point equations
``V(x) = sum_x' P(x'|x,pi(x)) (r + gamma V(x'))`` and the analogous risk
equation with the risk cost and its own discount; the absorbing sink is
pinned at zero and excluded from the linear systems.  Optimal policies come
from value iteration with lexicographic tie-breaking that mirrors the
learner's action ordering: weighted criterion first, then plain value, then
lowest action index.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .mdp import ExplicitPolicy, FiniteMdp, StartDistribution, StateClass

__all__ = [
    "ExactEvaluation",
    "FeasibilityReport",
    "evaluate_policy",
    "optimal_weighted_policy",
    "min_risk_policy",
    "max_value_policy",
    "feasibility",
    "aggregate_value",
    "evaluation_csv",
]

# states this many iterations of sweeping may cover before we give up
_MAX_SWEEPS = 200_000
# direct linear solve below this size, iterative sweeps above
_DIRECT_LIMIT = 2000
# two actions tie when their backed-up criteria differ by no more than this
_TIE_TOL = 1e-9


@dataclass
class ExactEvaluation:
    """Per-state value, risk, and discounted risk of a fixed policy.

    ``risks`` is the undiscounted probability of ever reaching an error
    state; ``discounted_risks`` applies the risk discount ``gamma_bar`` and
    is bounded above by ``risks`` state-wise.
    """

    labels: list
    values: np.ndarray
    risks: np.ndarray
    discounted_risks: np.ndarray

    def value_of(self, label) -> float:
        return float(self.values[self.labels.index(label)])

    def risk_of(self, label) -> float:
        return float(self.risks[self.labels.index(label)])

    def as_dicts(self):
        v = dict(zip(self.labels, self.values))
        r = dict(zip(self.labels, self.risks))
        rg = dict(zip(self.labels, self.discounted_risks))
        return v, r, rg


@dataclass
class FeasibilityReport:
    feasible: bool
    worst_state: object
    worst_risk: float
    omega: float


class OracleConvergenceError(RuntimeError):
    """Raised when an iterative solve fails to reach tolerance."""


def _solve_fixed_point(P_sub: np.ndarray, r_sub: np.ndarray, gamma: float,
                       tol: float, labels: list, method: str) -> np.ndarray:
    """Solve v = r + gamma * P v on the sink-free block."""
    n = P_sub.shape[0]
    if method == "direct" or (method == "auto" and n <= _DIRECT_LIMIT):
        return np.linalg.solve(np.eye(n) - gamma * P_sub, r_sub)
    v = np.zeros(n)
    for _ in range(_MAX_SWEEPS):
        v_new = r_sub + gamma * (P_sub @ v)
        if np.abs(v_new - v).max() < tol * 1e-3:
            v = v_new
            break
        v = v_new
    resid = np.abs(v - (r_sub + gamma * (P_sub @ v)))
    worst = int(resid.argmax())
    if resid[worst] >= tol:
        raise OracleConvergenceError(
            f"policy evaluation did not converge: residual {resid[worst]:.3e} "
            f"at state {labels[worst]}")
    return v


def evaluate_policy(mdp: FiniteMdp, policy, gamma: float, gamma_bar: float = 1.0,
                    tol: float = 1e-10, method: str = "auto") -> ExactEvaluation:
    """Exact value/risk/discounted-risk of a deterministic policy.

    ``gamma`` discounts rewards, ``gamma_bar`` discounts the auxiliary risk
    return reported in ``discounted_risks``; ``risks`` is always the
    undiscounted error probability.  ``method`` is ``auto`` (direct solve up
    to a size limit, sweeps above), ``direct``, or ``iterative``.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= gamma_bar <= 1.0):
        raise ValueError("discount factors must lie in [0, 1]")
    mdp.validate()
    actions = policy.as_array(mdp.n_states) if isinstance(policy, ExplicitPolicy) else \
        np.array([policy.action(s) for s in range(mdp.n_states)], dtype=np.int64)
    P_pi, r_pi, rbar_pi = mdp.policy_kernel(actions)
    keep = np.arange(mdp.n_states) != mdp.eta
    P_sub = P_pi[np.ix_(keep, keep)]
    labels = [mdp.labels[s] for s in range(mdp.n_states) if keep[s]]

    v_sub = _solve_fixed_point(P_sub, r_pi[keep], gamma, tol, labels, method)
    rho_sub = _solve_fixed_point(P_sub, rbar_pi[keep], 1.0, tol, labels, method)
    if gamma_bar == 1.0:
        rho_g_sub = rho_sub
    else:
        rho_g_sub = _solve_fixed_point(P_sub, rbar_pi[keep], gamma_bar, tol, labels, method)

    values = np.zeros(mdp.n_states)
    risks = np.zeros(mdp.n_states)
    risks_g = np.zeros(mdp.n_states)
    values[keep] = v_sub
    risks[keep] = np.clip(rho_sub, 0.0, 1.0)
    risks_g[keep] = np.clip(rho_g_sub, 0.0, 1.0)
    return ExactEvaluation(list(mdp.labels), values, risks, risks_g)


def _action_mask(mdp: FiniteMdp) -> np.ndarray:
    mask = np.zeros((mdp.n_states, mdp.n_actions), dtype=bool)
    for s in range(mdp.n_states):
        mask[s, : int(mdp.action_counts[s])] = True
    return mask


def _value_iteration(mdp: FiniteMdp, W: np.ndarray, gamma: float, tol: float,
                     allowed: np.ndarray, what: str):
    """Max-criterion value iteration restricted to ``allowed`` actions.

    Returns the converged state values and the backed-up action values.
    """
    J = np.zeros(mdp.n_states)
    expected = (mdp.P * W).sum(axis=2)  # one-step expected criterion reward
    for _ in range(_MAX_SWEEPS):
        Q = expected + gamma * (mdp.P @ J)
        Q = np.where(allowed, Q, -np.inf)
        J_new = Q.max(axis=1)
        delta = np.abs(J_new - J).max()
        J = J_new
        if delta < tol * 1e-3:
            break
    Q = expected + gamma * (mdp.P @ J)
    Q = np.where(allowed, Q, -np.inf)
    resid = np.abs(Q.max(axis=1) - J)
    worst = int(resid.argmax())
    if resid[worst] >= tol:
        raise OracleConvergenceError(
            f"{what} value iteration did not converge: residual "
            f"{resid[worst]:.3e} at state {mdp.labels[worst]}")
    return J, Q


def _lexicographic_policy(mdp: FiniteMdp, primary_W, primary_gamma,
                          secondary_W, secondary_gamma, tol, what):
    """Optimal policy for a primary criterion with a secondary tie-break.

    Stage one maximizes the primary criterion; stage two maximizes the
    secondary criterion over the primary-optimal action sets; remaining ties
    resolve to the lowest action index (the learner's ordering).
    """
    valid = _action_mask(mdp)
    J1, Q1 = _value_iteration(mdp, primary_W, primary_gamma, tol, valid, what)
    tie1 = valid & (Q1 >= J1[:, None] - _TIE_TOL)
    J2, Q2 = _value_iteration(mdp, secondary_W, secondary_gamma, tol, tie1,
                              what + " tie-break")
    tie2 = tie1 & (Q2 >= J2[:, None] - _TIE_TOL)
    actions = tie2.argmax(axis=1)  # first True = lowest action index
    return ExplicitPolicy(actions.astype(np.int64))


def optimal_weighted_policy(mdp: FiniteMdp, xi: float, gamma: float,
                            tol: float = 1e-10, gamma_bar: float | None = None):
    """Exact optimal policy for the weighted criterion ``xi * r - rbar``.

    For ``xi > 0`` the weighted criterion is a standard single-criterion
    MDP only when both discounts agree, so ``gamma_bar`` must equal
    ``gamma``; at ``xi = 0`` the criterion reduces to pure risk
    minimization and any value discount is allowed for the tie-break.
    Returns the policy and its exact evaluation.
    """
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    if gamma_bar is None:
        gamma_bar = gamma if xi > 0 else 1.0
    if xi > 0 and gamma_bar != gamma:
        raise ValueError("weighted optimality requires equal discount factors for xi > 0")
    W = xi * mdp.R - mdp.RBAR
    policy = _lexicographic_policy(mdp, W, gamma_bar if xi == 0 else gamma,
                                   mdp.R, gamma, tol, what=f"weighted(xi={xi:g})")
    return policy, evaluate_policy(mdp, policy, gamma, gamma_bar, tol)


def min_risk_policy(mdp: FiniteMdp, gamma: float, tol: float = 1e-10):
    """Policy minimizing the undiscounted error probability at every state,
    preferring higher value among risk-optimal actions."""
    return optimal_weighted_policy(mdp, 0.0, gamma, tol, gamma_bar=1.0)


def max_value_policy(mdp: FiniteMdp, gamma: float, tol: float = 1e-10):
    """Value-dominant limit of the weighted criterion: maximize value, break
    ties toward lower undiscounted risk."""
    policy = _lexicographic_policy(mdp, mdp.R, gamma, -mdp.RBAR, 1.0, tol,
                                   what="max-value")
    return policy, evaluate_policy(mdp, policy, gamma, 1.0, tol)


def feasibility(evaluation: ExactEvaluation, start: StartDistribution,
                omega: float) -> FeasibilityReport:
    """Check the risk bound on every state in the start support and report
    the worst offender."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    worst_state, worst_risk = None, -1.0
    for s in start.states:
        i = s if isinstance(s, (int, np.integer)) else evaluation.labels.index(s)
        rho = float(evaluation.risks[i])
        if rho > worst_risk:
            worst_state, worst_risk = evaluation.labels[i], rho
    return FeasibilityReport(feasible=worst_risk <= omega, worst_state=worst_state,
                             worst_risk=worst_risk, omega=omega)


def aggregate_value(evaluation: ExactEvaluation, start: StartDistribution) -> float:
    """Start-weighted mean value over the start support."""
    total = 0.0
    for s, p in zip(start.states, start.probs):
        i = s if isinstance(s, (int, np.integer)) else evaluation.labels.index(s)
        total += p * float(evaluation.values[i])
    return total


def evaluation_csv(evaluation: ExactEvaluation) -> str:
    """Export: columns state, V, rho, rho_gamma."""
    buf = io.StringIO()
    buf.write("state,value,risk,discounted_risk\n")
    for lab, v, r, rg in zip(evaluation.labels, evaluation.values,
                             evaluation.risks, evaluation.discounted_risks):
        buf.write(f"{lab},{v:.12g},{r:.12g},{rg:.12g}\n")
    return buf.getvalue()
