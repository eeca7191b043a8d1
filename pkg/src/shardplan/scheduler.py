"""Batch-size sweep: search a plan per batch size, keep the throughput maximizer."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from .costs import (
    Coefficients,
    CostOptions,
    activation_bytes,
    build_cost_table,
    model_state_bytes,
    operator_time,
)
from .errors import ModelDoesNotFit, SpecParseError, SpecValidationError
from .model import DeviceSpec, ModelSpec, _loads
from .search import PlanCandidate, baseline_plans, min_peak_memory, search_optimal
from .splitting import DEFAULT_MAX_SLICES, Decision, peak_surge, select_slice_granularity

logger = logging.getLogger(__name__)

PLAN_SCHEMA = "osdp-plan/v1"
DEFAULT_BATCH_CAP = 4096
MODES = ("optimal", "all_dp", "all_zdp")


@dataclass(frozen=True)
class GranularityPolicy:
    """How many slices each splittable operator is cut into.

    ``fixed`` applies one slice count everywhere (clamped to the operator's
    hidden size); ``surge_budget_bytes`` picks per operator with
    :func:`select_slice_granularity`. Neither means no splitting.
    """

    fixed: int | None = None
    surge_budget_bytes: float | None = None
    s_max: int = DEFAULT_MAX_SLICES
    overrides: Mapping[str, int] = field(default_factory=dict)

    def resolve(self, model: ModelSpec) -> dict[str, int]:
        out = {}
        for op in model.operators:
            if op.id in self.overrides:
                s = self.overrides[op.id]
            elif not op.splittable:
                s = 1
            elif self.fixed is not None:
                s = min(self.fixed, op.hidden_size) if op.hidden_size else self.fixed
            elif self.surge_budget_bytes is not None:
                s = select_slice_granularity(op, self.surge_budget_bytes, self.s_max)
            else:
                s = 1
            out[op.id] = s
        return out

    def to_dict(self) -> dict:
        return {
            "fixed": self.fixed,
            "surge_budget_bytes": self.surge_budget_bytes,
            "s_max": self.s_max,
            "overrides": dict(self.overrides),
        }


@dataclass(frozen=True)
class ExecutionPlan:
    operator_ids: tuple[str, ...]
    decisions: tuple[Decision, ...]
    batch_size: int
    iter_time_s: float
    peak_mem_bytes: float
    throughput_samples_per_s: float
    checkpoint: bool = False
    # "memory": sweep ended because the next batch size no longer fits;
    # "batch_cap": it hit the cap first
    stop_reason: str = "memory"
    cost_options: CostOptions = field(default_factory=CostOptions)

    def granularities(self) -> dict[str, int]:
        return {i: d.s for i, d in zip(self.operator_ids, self.decisions)}

    def decision_map(self) -> dict[str, Decision]:
        return dict(zip(self.operator_ids, self.decisions))


def _throughput(b: int, time_s: float) -> float:
    return b / time_s if time_s > 0 else float("inf")


def _better(b: int, t: float, best_b: int, best_t: float) -> bool:
    # exact comparison of b/t against best_b/best_t; strict, so earlier (smaller) b wins ties
    if best_t == 0:
        return False
    if t == 0:
        return True
    return Fraction(b) * Fraction(best_t) > Fraction(best_b) * Fraction(t)


def schedule(
    model: ModelSpec,
    device: DeviceSpec,
    coeffs: Coefficients,
    checkpoint: bool = False,
    granularity: GranularityPolicy | None = None,
    batch_cap: int = DEFAULT_BATCH_CAP,
    growth: str = "linear",
    mode: str = "optimal",
    options: CostOptions | None = None,
    candidates: list | None = None,
) -> ExecutionPlan:
    """Sweep b = 1, 2, 3, ... and return the highest-throughput plan.

    The sweep stops at the first batch size where no decision vector fits in
    memory (or at ``batch_cap``). ``mode`` restricts the search to all-DP or
    all-ZDP for baseline comparison. ``growth="geometric"`` doubles b instead
    of incrementing; it is faster but can skip the true optimum. When
    ``candidates`` is a list, every (b, PlanCandidate) is appended to it.
    """
    if mode not in MODES:
        raise SpecValidationError("mode", f"must be one of {MODES}")
    if growth not in ("linear", "geometric"):
        raise SpecValidationError("growth", "must be 'linear' or 'geometric'")
    if batch_cap < 1:
        raise SpecValidationError("batch_cap", "must be >= 1")
    if options is None:
        options = CostOptions(checkpoint=checkpoint)
    granularities = (granularity or GranularityPolicy()).resolve(model)
    if mode == "all_dp":
        granularities = {i: 1 for i in granularities}

    found: list[tuple[int, PlanCandidate]] = []
    stop_reason = "batch_cap"
    first_table = None
    b = 1
    while b <= batch_cap:
        table = build_cost_table(model, device, coeffs, b, granularities=granularities, options=options)
        if first_table is None:
            first_table = table
        if mode == "optimal":
            cand = search_optimal(table, device)
        else:
            all_dp, all_zdp = baseline_plans(table, device)
            cand = all_dp if mode == "all_dp" else all_zdp
            if not cand.feasible:
                cand = None
        if cand is None:
            stop_reason = "memory"
            break
        found.append((b, cand))
        logger.debug("b=%d time=%.6g peak=%.6g", b, cand.total_time_s, cand.peak_mem_bytes)
        b = b + 1 if growth == "linear" else b * 2

    if candidates is not None:
        candidates.extend(found)
    if not found:
        if mode == "optimal":
            need = min_peak_memory(first_table, device)
        else:
            all_dp, all_zdp = baseline_plans(first_table, device)
            need = (all_dp if mode == "all_dp" else all_zdp).peak_mem_bytes
        gap = need - device.mem_limit_bytes
        raise ModelDoesNotFit(
            f"{model.name} does not fit at batch size 1 ({mode}): needs {need:.6g} bytes, "
            f"limit {device.mem_limit_bytes:.6g} (short by {gap:.6g})",
            gap_bytes=gap,
        )
    if stop_reason == "batch_cap":
        logger.info("batch sweep hit the cap (%d) before memory ran out", batch_cap)

    best_b, best = found[0]
    for b, cand in found[1:]:
        if _better(b, cand.total_time_s, best_b, best.total_time_s):
            best_b, best = b, cand
    return ExecutionPlan(
        operator_ids=best.operator_ids,
        decisions=best.decisions,
        batch_size=best_b,
        iter_time_s=best.total_time_s,
        peak_mem_bytes=best.peak_mem_bytes,
        throughput_samples_per_s=_throughput(best_b, best.total_time_s),
        checkpoint=options.checkpoint,
        stop_reason=stop_reason,
        cost_options=options,
    )


def schedule_baselines(model, device, coeffs, **kwargs) -> dict[str, ExecutionPlan | None]:
    """Best all-DP and all-ZDP plans, each at its own best batch size; None if it never fits."""
    out = {}
    for mode in ("all_dp", "all_zdp"):
        try:
            out[mode] = schedule(model, device, coeffs, mode=mode, **kwargs)
        except ModelDoesNotFit:
            out[mode] = None
    return out


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class OperatorLine:
    operator_id: str
    s: int
    k: int
    time_s: float
    state_bytes: float
    activation_bytes: float
    surge_bytes: float

    @property
    def mode(self) -> str:
        if self.k == 0:
            return "DP"
        if self.k == self.s:
            return "ZDP"
        return f"{self.k}/{self.s} ZDP"


@dataclass
class Report:
    model_name: str
    label: str
    n_workers: int
    plan: ExecutionPlan
    baselines: dict[str, ExecutionPlan | None]
    operators: list[OperatorLine]
    memory: dict[str, float]

    def ratio(self, baseline: str) -> float | None:
        other = self.baselines.get(baseline)
        if other is None:
            return None
        return self.plan.throughput_samples_per_s / other.throughput_samples_per_s

    def system_throughput(self, plan: ExecutionPlan | None) -> float | None:
        return None if plan is None else plan.throughput_samples_per_s * self.n_workers

    def to_text(self) -> str:
        p = self.plan
        lines = [
            f"model {self.model_name} {self.label}  workers={self.n_workers}",
            f"batch size (per worker): {p.batch_size}   stop: {p.stop_reason}   checkpoint: {p.checkpoint}",
            f"iteration time: {p.iter_time_s:.6g} s",
            f"throughput: {p.throughput_samples_per_s:.6g} samples/s per worker, "
            f"{self.system_throughput(p):.6g} samples/s system (x{self.n_workers} workers)",
            "",
            f"{'plan':<10} {'batch':>6} {'iter s':>12} {'system samples/s':>18} {'ratio':>8}",
            f"{'optimal':<10} {p.batch_size:>6} {p.iter_time_s:>12.6g} {self.system_throughput(p):>18.6g} {1.0:>8.4f}",
        ]
        for name in ("all_zdp", "all_dp"):
            other = self.baselines.get(name)
            if other is None:
                lines.append(f"{name:<10} {'-':>6} {'-':>12} {'does not fit':>18} {'-':>8}")
            else:
                lines.append(
                    f"{name:<10} {other.batch_size:>6} {other.iter_time_s:>12.6g} "
                    f"{self.system_throughput(other):>18.6g} {1.0 / self.ratio(name):>8.4f}"
                )
        lines += ["", "memory (bytes):"]
        for key in ("model_states", "activations", "surge", "overhead", "peak"):
            lines.append(f"  {key:<13} {self.memory[key]:.6g}")
        lines += ["", f"{'operator':<20} {'s':>3} {'k':>3} {'mode':>10} {'time s':>12} {'states B':>12}"]
        for op in self.operators:
            lines.append(
                f"{op.operator_id:<20} {op.s:>3} {op.k:>3} {op.mode:>10} {op.time_s:>12.6g} {op.state_bytes:>12.6g}"
            )
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "model": self.model_name,
            "label": self.label,
            "n_workers": self.n_workers,
            "system_throughput": self.system_throughput(self.plan),
            "ratio_vs_all_zdp": self.ratio("all_zdp"),
            "ratio_vs_all_dp": self.ratio("all_dp"),
            "memory": dict(self.memory),
            "operators": [
                {"operator_id": o.operator_id, "s": o.s, "k": o.k, "mode": o.mode, "time_s": o.time_s}
                for o in self.operators
            ],
        }


def model_label(model: ModelSpec) -> str:
    """``[layers hidden]`` label, ``var`` when hidden sizes differ."""
    blocks = {op.id.split(".")[0] for op in model.operators}
    layers = len(blocks) if len(blocks) < len(model.operators) else len(model.operators)
    hidden = {op.hidden_size for op in model.operators}
    h = str(hidden.pop()) if len(hidden) == 1 else "var"
    return f"[{layers} {h}]"


def plan_report(
    plan: ExecutionPlan,
    model: ModelSpec,
    device: DeviceSpec,
    coeffs: Coefficients,
    baselines: dict[str, ExecutionPlan | None] | None = None,
) -> Report:
    if baselines is None:
        baselines = schedule_baselines(
            model, device, coeffs, options=plan.cost_options, granularity=GranularityPolicy(overrides=plan.granularities())
        )
    opts = plan.cost_options
    N = device.n_workers
    lines = []
    states = acts = 0.0
    surge = 0
    for op in model.operators:
        d = plan.decision_map()[op.id]
        st = model_state_bytes(op, d, N, device.bytes_per_param_state)
        ac = activation_bytes(op, plan.batch_size, opts.checkpoint, opts.checkpoint_activation_fraction)
        sg = peak_surge(op, d)
        t = operator_time(op, d, plan.batch_size, N, coeffs, opts.checkpoint, opts.split_penalty_s)
        lines.append(OperatorLine(op.id, d.s, d.k, t, st, ac, sg))
        states += st
        acts += ac
        surge = max(surge, sg)
    memory = {
        "model_states": states,
        "activations": acts,
        "surge": surge,
        "overhead": device.fixed_overhead_bytes,
        "peak": plan.peak_mem_bytes,
    }
    return Report(model.name, model_label(model), N, plan, baselines, lines, memory)


# ---------------------------------------------------------------------------
# plan file
# ---------------------------------------------------------------------------


def _plan_summary(plan: ExecutionPlan | None) -> dict | None:
    if plan is None:
        return None
    return {
        "batch_size": plan.batch_size,
        "iter_time_s": plan.iter_time_s,
        "throughput": plan.throughput_samples_per_s,
        "peak_mem_bytes": plan.peak_mem_bytes,
    }


def plan_to_dict(plan: ExecutionPlan, baselines: dict[str, ExecutionPlan | None] | None = None) -> dict:
    return {
        "schema": PLAN_SCHEMA,
        "batch_size": plan.batch_size,
        "iter_time_s": plan.iter_time_s,
        "throughput": plan.throughput_samples_per_s,
        "peak_mem_bytes": plan.peak_mem_bytes,
        "checkpoint": plan.checkpoint,
        "stop_reason": plan.stop_reason,
        "cost_options": plan.cost_options.to_dict(),
        "decisions": [
            {"operator_id": i, "s": d.s, "k": d.k} for i, d in zip(plan.operator_ids, plan.decisions)
        ],
        "baselines": {name: _plan_summary(p) for name, p in (baselines or {}).items()},
    }


def dump_plan(plan: ExecutionPlan, baselines=None) -> str:
    return json.dumps(plan_to_dict(plan, baselines), indent=2)


def plan_from_dict(data) -> ExecutionPlan:
    if not isinstance(data, dict):
        raise SpecParseError("plan file must be a JSON object")
    if data.get("schema") != PLAN_SCHEMA:
        raise SpecValidationError("schema", f"expected {PLAN_SCHEMA!r}, got {data.get('schema')!r}")
    try:
        decisions = data["decisions"]
        ids = tuple(d["operator_id"] for d in decisions)
        decs = tuple(Decision(int(d["s"]), int(d["k"])) for d in decisions)
        checkpoint = bool(data.get("checkpoint", False))
        opts = CostOptions.from_dict(data.get("cost_options", {"checkpoint": checkpoint}))
        return ExecutionPlan(
            operator_ids=ids,
            decisions=decs,
            batch_size=int(data["batch_size"]),
            iter_time_s=float(data["iter_time_s"]),
            peak_mem_bytes=float(data["peak_mem_bytes"]),
            throughput_samples_per_s=float(data["throughput"]),
            checkpoint=checkpoint,
            stop_reason=data.get("stop_reason", "memory"),
            cost_options=opts,
        )
    except KeyError as exc:
        raise SpecValidationError(str(exc.args[0]), "missing required field") from None
    except (TypeError, ValueError) as exc:
        raise SpecValidationError("decisions", str(exc)) from None


def parse_plan(text: str) -> ExecutionPlan:
    return plan_from_dict(_loads(text))
