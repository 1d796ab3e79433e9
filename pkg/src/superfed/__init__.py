"""Desk-scale simulator for subspace-connected personalized federated learning."""

from superfed.nn import NetworkSpec, WeightVector, OptimizerState
from superfed.mixing import MixScheme, LambdaAssignment, RegularizerConfig
from superfed.federation import FedConfig, ClientState, ServerState, run

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec",
    "WeightVector",
    "OptimizerState",
    "MixScheme",
    "LambdaAssignment",
    "RegularizerConfig",
    "FedConfig",
    "ClientState",
    "ServerState",
    "run",
]
