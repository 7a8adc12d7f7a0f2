"""Compress DAG-structured LLM workflows by pruning nodes and substituting cheaper models."""

from __future__ import annotations

__version__ = "0.1.0"

from .compressor import (
    CandidatePool,
    PipelineResult,
    StageConfig,
    StepRecord,
    prune_stage,
    quant_stage,
    run_pipeline,
)
from .evaluation import (
    Dataset,
    DatasetInstance,
    EvalOutcome,
    PricingTable,
    SyntheticEvaluator,
    SyntheticTaskSpec,
    evaluate,
    sample_probe,
)
from .graph import (
    Edge,
    Node,
    WorkflowGraph,
    remove_node_with_patch,
    substitute_model,
    topo_order,
    validate,
)
from .importance import FusionConfig, RankTable, SignalSet, rank_and_fuse
from .report import benchmark_scenarios, break_even, cost_reduction, pareto_frontier
from .tuner import TunerConfig, builtin_mutations, mixed_select, tune

__all__ = [
    "CandidatePool",
    "Dataset",
    "DatasetInstance",
    "Edge",
    "EvalOutcome",
    "FusionConfig",
    "Node",
    "PipelineResult",
    "PricingTable",
    "RankTable",
    "SignalSet",
    "StageConfig",
    "StepRecord",
    "SyntheticEvaluator",
    "SyntheticTaskSpec",
    "TunerConfig",
    "WorkflowGraph",
    "benchmark_scenarios",
    "break_even",
    "builtin_mutations",
    "cost_reduction",
    "evaluate",
    "mixed_select",
    "pareto_frontier",
    "prune_stage",
    "quant_stage",
    "rank_and_fuse",
    "remove_node_with_patch",
    "run_pipeline",
    "sample_probe",
    "substitute_model",
    "topo_order",
    "tune",
    "validate",
]
