# core/__init__.py
from .experiment import ExperimentResult, ExperimentRunner
from .federation import CentralizedTrainer, FederatedTrainer, FederationConfig
from .hierarchy import ClusterSpec, HierarchicalTrainer

__all__ = [
    "ExperimentResult",
    "ExperimentRunner",
    "CentralizedTrainer",
    "FederatedTrainer",
    "FederationConfig",
    "ClusterSpec",
    "HierarchicalTrainer",
]
