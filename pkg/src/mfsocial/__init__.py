"""Linear-quadratic mean-field social control on clustered networks.

Exact centralized feedback via coupled Riccati equations, distributed control
through cluster mean-field estimators, Monte Carlo simulation, and brute-force
certification against the stacked finite-population problem.
"""

__version__ = "0.1.0"

from .model import (ClusterSpec, ConfigError, DerivedMatrices, NetworkTopology, SystemSpec,
                    derive_matrices, load_spec, load_spec_file, neighbor_set)
from .riccati import RiccatiSolution, closed_loop_matrices, riccati_residual, solve_riccati
from .control import (GainSchedule, average_cluster_control, centralized_control,
                      distributed_control)
from .simulate import (NoiseBundle, System, TrajectoryBundle, draw_noise, simulate_centralized,
                       simulate_coupled, simulate_distributed, simulate_openloop)
from .cost import CostReport, cost_decomposition, social_cost, value_function

__all__ = [
    "ClusterSpec", "ConfigError", "DerivedMatrices", "NetworkTopology", "SystemSpec",
    "derive_matrices", "load_spec", "load_spec_file", "neighbor_set",
    "RiccatiSolution", "closed_loop_matrices", "riccati_residual", "solve_riccati",
    "GainSchedule", "average_cluster_control", "centralized_control", "distributed_control",
    "NoiseBundle", "System", "TrajectoryBundle", "draw_noise", "simulate_centralized",
    "simulate_coupled", "simulate_distributed", "simulate_openloop",
    "CostReport", "cost_decomposition", "social_cost", "value_function",
]
