"""Per-operator sharding planner for data-parallel training.

Chooses, for every operator, how many of its weight slices stay replicated
(DP) and how many are sharded and gathered on demand (ZDP), and the batch size
that maximizes throughput under a device memory limit.
"""

from .costs import (
    Coefficients,
    CostOptions,
    CostTable,
    DecisionCost,
    MeasurementRecord,
    allgather_time,
    build_cost_table,
    fit_coefficients,
    operator_memory,
    operator_time,
    reduce_scatter_time,
    synthesize_measurements,
)
from .errors import (
    CalibrationMissing,
    DimensionError,
    ModelDoesNotFit,
    PlannerError,
    SearchTooLarge,
    SpecParseError,
    SpecValidationError,
    UnderdeterminedFit,
)
from .model import DeviceSpec, ModelSpec, OperatorSpec, generate_family, parse_device_spec, parse_model_spec
from .scheduler import ExecutionPlan, GranularityPolicy, parse_plan, plan_report, schedule, schedule_baselines
from .search import PlanCandidate, baseline_plans, brute_force_search, evaluate_plan, search_optimal
from .simulator import SimEvent, SimReport, peak_memory_trace, simulate
from .splitting import Decision, peak_surge, select_slice_granularity, split_matmul

__version__ = "0.1.0"

__all__ = [
    "CalibrationMissing",
    "Coefficients",
    "CostOptions",
    "CostTable",
    "Decision",
    "DecisionCost",
    "DeviceSpec",
    "DimensionError",
    "ExecutionPlan",
    "GranularityPolicy",
    "MeasurementRecord",
    "ModelDoesNotFit",
    "ModelSpec",
    "OperatorSpec",
    "PlanCandidate",
    "PlannerError",
    "SearchTooLarge",
    "SimEvent",
    "SimReport",
    "SpecParseError",
    "SpecValidationError",
    "UnderdeterminedFit",
    "allgather_time",
    "baseline_plans",
    "brute_force_search",
    "build_cost_table",
    "evaluate_plan",
    "fit_coefficients",
    "generate_family",
    "operator_memory",
    "operator_time",
    "parse_device_spec",
    "parse_model_spec",
    "parse_plan",
    "peak_memory_trace",
    "peak_surge",
    "plan_report",
    "reduce_scatter_time",
    "schedule",
    "schedule_baselines",
    "search_optimal",
    "select_slice_granularity",
    "simulate",
    "split_matmul",
    "synthesize_measurements",
]
