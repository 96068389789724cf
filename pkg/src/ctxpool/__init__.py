"""Distributed task engine with context-aware placement and an opportunistic-pool emulator."""

from .core import (
    Awareness,
    BuildCostDescriptor,
    Config,
    ContextRecipe,
    CostModel,
    GpuModel,
    InferenceItem,
    ResourceRequest,
    Stage,
    TaskSpec,
    default_recipe,
    load_config,
    recipe_hash,
)
from .harness import ExperimentSpec, MetricsSeries, run_experiment, summarize

__all__ = [
    "Awareness",
    "BuildCostDescriptor",
    "Config",
    "ContextRecipe",
    "CostModel",
    "ExperimentSpec",
    "GpuModel",
    "InferenceItem",
    "MetricsSeries",
    "ResourceRequest",
    "Stage",
    "TaskSpec",
    "default_recipe",
    "load_config",
    "recipe_hash",
    "run_experiment",
    "summarize",
]
__version__ = "0.1.0"
