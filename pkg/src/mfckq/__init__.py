"""Kernel-based Q-learning for mean-field control on an epsilon-net of the lifted space."""
from __future__ import annotations

__version__ = "0.1.0"

from .env import CongestionEnv, CongestionParams, congestion_flow, congestion_reward
from .errors import (
    ConfigurationError,
    ContractError,
    ConvergenceError,
    CoverageError,
    DimensionError,
    MfcError,
    ResourceError,
)
from .geometry import EpsilonNet, LiftedPair, build_epsilon_net, dist_lifted
from .kernels import KernelSpec, regress, weights
from .solver import (
    QTable,
    SampleStore,
    SolverConfig,
    explore_and_collect,
    extract_policy,
    oracle_value_iteration,
    solve,
    solve_fixed_point,
)

__all__ = [
    "CongestionEnv", "CongestionParams", "congestion_flow", "congestion_reward",
    "ConfigurationError", "ContractError", "ConvergenceError", "CoverageError", "DimensionError",
    "MfcError", "ResourceError", "EpsilonNet", "LiftedPair", "build_epsilon_net", "dist_lifted",
    "KernelSpec", "regress", "weights", "QTable", "SampleStore", "SolverConfig", "explore_and_collect",
    "extract_policy", "oracle_value_iteration", "solve", "solve_fixed_point",
]
