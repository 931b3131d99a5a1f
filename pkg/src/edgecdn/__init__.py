"""Content replication in edge-assisted CDNs modelled as a loss network."""

from .adaptive import EvictionRule, VirtualLossConfig
from .estimators import (GreedyReplication, LossNetworkSimulator, MeanFieldLossModel,
                         OptimizedReplication, ProportionalReplication)
from .meanfield import MeanFieldSolution, fixed_point_solve
from .model import (Catalog, ClassSpec, InfeasibleProfileError, ReplicationProfile,
                    SystemParams, class_catalog, proportional_replication, zipf_catalog)
from .optimizer import greedy_marginal_allocation, optimized_replication
from .sim.engine import SimConfig, SimMetrics, run

__version__ = "0.1.0"

__all__ = [
    "Catalog", "ClassSpec", "EvictionRule", "GreedyReplication", "InfeasibleProfileError",
    "LossNetworkSimulator", "MeanFieldLossModel", "MeanFieldSolution",
    "OptimizedReplication", "ProportionalReplication", "ReplicationProfile", "SimConfig",
    "SimMetrics", "SystemParams", "VirtualLossConfig", "class_catalog",
    "fixed_point_solve", "greedy_marginal_allocation", "optimized_replication",
    "proportional_replication", "run", "zipf_catalog",
]
