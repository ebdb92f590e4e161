"""Discrete-event simulator for federated-learning aggregation backends.

Three backends share one fusion pipeline: a single centralized aggregator,
an always-on k-ary aggregation tree, and queue-triggered serverless
functions that build the tree on demand.
"""

from .backend import RoundFailed, RoundPolicy, RoundRecord, aggregation_latency
from .broker import Broker
from .fusion import (
    DoubleCountError,
    FusionAlgorithm,
    FusionError,
    GlobalModel,
    ModelUpdate,
    PartialAggregate,
    canonical_result,
    finalize,
    leaf_aggregate,
    merge,
    relative_difference,
)
from .kernel import Distribution, HorizonExceeded, Kernel, PastEventError
from .metrics import RoundMetrics, RunReport, project_cost, savings_percent, write_report
from .scaler import PodPool
from .scenario import ConfigError, ScenarioConfig, compare, load_canned, parse_config, run_scenario
from .serverless import ServerlessBackend, TriggerSpec, evaluate_trigger, run_round_serverless
from .topologies import (
    CentralizedBackend,
    ContainerSpec,
    StaticTreeBackend,
    TreePlan,
    build_tree,
    reconfigure_tree,
    run_round_centralized,
    run_round_static_tree,
)

__all__ = [
    "Broker",
    "CentralizedBackend",
    "ConfigError",
    "ContainerSpec",
    "Distribution",
    "DoubleCountError",
    "FusionAlgorithm",
    "FusionError",
    "GlobalModel",
    "HorizonExceeded",
    "Kernel",
    "ModelUpdate",
    "PartialAggregate",
    "PastEventError",
    "PodPool",
    "RoundFailed",
    "RoundMetrics",
    "RoundPolicy",
    "RoundRecord",
    "RunReport",
    "ScenarioConfig",
    "ServerlessBackend",
    "StaticTreeBackend",
    "TreePlan",
    "TriggerSpec",
    "aggregation_latency",
    "build_tree",
    "canonical_result",
    "compare",
    "evaluate_trigger",
    "finalize",
    "leaf_aggregate",
    "load_canned",
    "merge",
    "parse_config",
    "project_cost",
    "reconfigure_tree",
    "relative_difference",
    "run_round_centralized",
    "run_round_serverless",
    "run_round_static_tree",
    "run_scenario",
    "savings_percent",
    "write_report",
]

__version__ = "0.1.0"
