"""Cost-based packing optimizer for annotated MapReduce workflows."""

from .cost import estimate_job, estimate_plan, fallback_cost
from .executor import InMemoryDataset, collect_profile, compare_outputs, run_plan
from .ir import ClusterSpec, Configuration, Plan, loads_plan, parse_plan, validate
from .search import RrsParams, enumerate_subplans, next_optimization_unit, optimize
from .transforms import apply, replay
from .udfs import default_registry

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "Configuration", "InMemoryDataset", "Plan", "RrsParams", "apply", "collect_profile",
    "compare_outputs", "default_registry", "enumerate_subplans", "estimate_job", "estimate_plan", "fallback_cost",
    "loads_plan", "next_optimization_unit", "optimize", "parse_plan", "replay", "run_plan", "validate",
]
