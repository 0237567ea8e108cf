"""Risk-constrained reinforcement learning: dual Q/risk TD learning with an
adaptive trade-off weight, exact DP verification, and two reference control
problems (a stochastic grid world and a chance-constrained feed tank)."""

from .mdp import (
    EpisodeTrace,
    ExplicitPolicy,
    FiniteMdp,
    FiniteMdpEnv,
    GreedyPolicy,
    StartDistribution,
    StateClass,
    TransitionSample,
    augment_with_eta,
    run_episode,
)
from .oracle import (
    ExactEvaluation,
    evaluate_policy,
    feasibility,
    max_value_policy,
    min_risk_policy,
    optimal_weighted_policy,
)

__version__ = "0.1.0"
