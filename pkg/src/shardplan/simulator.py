"""Discrete-event simulation of one training iteration under a plan.

Two resources: a compute stream and a communication stream. Forward walks the
operators in order, backward in reverse, each operator slice by slice; ZDP
slices gather weights before use and discard them after. When an operator's
backward finishes its gradients are reduce-scattered, and its DP slices are
all-gathered back (the two halves of an all-reduce).

Memory is tracked as deltas on top of a base footprint (all persistent
memory plus fixed overhead); only gathered ZDP slices move it.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .costs import Coefficients, allgather_time, build_cost_table, operator_time
from .errors import SpecValidationError
from .model import DeviceSpec, ModelSpec
from .scheduler import ExecutionPlan
from .search import evaluate_plan
from .splitting import peak_surge

EVENT_KINDS = ("allgather", "compute_fwd", "compute_bwd", "discard", "reduce_scatter", "recompute_gather")
COMM_KINDS = ("allgather", "reduce_scatter", "recompute_gather")
# share of an operator's per-iteration compute spent in forward; backward takes the rest
FORWARD_SHARE = 1 / 3


@dataclass(frozen=True)
class SimEvent:
    t_start: float
    t_end: float
    kind: str
    operator_id: str
    slice_index: int
    mem_delta_bytes: int = 0

    @property
    def resource(self) -> str:
        return "comm" if self.kind in COMM_KINDS else "compute"

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass
class SimReport:
    iter_time_s: float
    peak_mem_bytes: float
    timeline: list[SimEvent]
    base_mem_bytes: float = 0
    analytic_time_s: float = 0
    analytic_peak_bytes: float = 0
    overlap: bool = False
    comm_busy_s: float = 0
    compute_busy_s: float = 0
    # with prefetch the true peak can exceed the analytic peak by one slice
    exceeds_analytic_peak: bool = False

    def to_dict(self) -> dict:
        return {
            "iter_time_s": self.iter_time_s,
            "peak_mem_bytes": self.peak_mem_bytes,
            "base_mem_bytes": self.base_mem_bytes,
            "analytic_time_s": self.analytic_time_s,
            "analytic_peak_bytes": self.analytic_peak_bytes,
            "overlap": self.overlap,
            "comm_busy_s": self.comm_busy_s,
            "compute_busy_s": self.compute_busy_s,
            "exceeds_analytic_peak": self.exceeds_analytic_peak,
            "n_events": len(self.timeline),
        }


@dataclass
class _Step:
    """One unit of program order: an optional comm op followed by an optional compute op."""

    op_id: str
    slice_index: int
    comm_kind: str | None = None
    comm_time: float = 0.0
    gather_bytes: int = 0
    compute_kind: str | None = None
    compute_time: float = 0.0
    discard: bool = False
    # reduce-scatter may only start after this operator's last backward compute
    after_compute: bool = False


def _program(plan: ExecutionPlan, model: ModelSpec, device: DeviceSpec, coeffs: Coefficients) -> list[_Step]:
    opts = plan.cost_options
    N = device.n_workers
    b = plan.batch_size
    decisions = plan.decision_map()
    steps: list[_Step] = []

    def per_op(op):
        d = decisions[op.id]
        G = allgather_time(op.weight_bytes, N, coeffs)
        compute = b * coeffs.gamma(op.id)
        penalty = (d.s - 1) * opts.split_penalty_s if opts.split_penalty_s else 0
        return d, G, compute, penalty, peak_surge(op, d)

    for op in model.operators:
        d, G, compute, penalty, slice_bytes = per_op(op)
        fwd = compute * FORWARD_SHARE + penalty
        for j in range(d.s):
            zdp = j < d.k
            steps.append(
                _Step(
                    op.id,
                    j,
                    "allgather" if zdp else None,
                    G / d.s if zdp else 0.0,
                    slice_bytes if zdp else 0,
                    "compute_fwd",
                    fwd / d.s,
                    discard=zdp,
                )
            )

    for op in reversed(model.operators):
        d, G, compute, penalty, slice_bytes = per_op(op)
        bwd = compute - compute * FORWARD_SHARE
        for j in range(d.s):
            zdp = j < d.k
            if opts.checkpoint:
                # recompute the forward of this slice; ZDP slices must re-gather first
                steps.append(
                    _Step(
                        op.id,
                        j,
                        "recompute_gather" if zdp else None,
                        G / d.s if zdp else 0.0,
                        slice_bytes if zdp else 0,
                        "compute_fwd",
                        compute / d.s,
                        discard=zdp,
                    )
                )
            steps.append(
                _Step(
                    op.id,
                    j,
                    "allgather" if zdp else None,
                    G / d.s if zdp else 0.0,
                    slice_bytes if zdp else 0,
                    "compute_bwd",
                    bwd / d.s,
                    discard=zdp,
                )
            )
        steps.append(_Step(op.id, d.s - 1, "reduce_scatter", G, after_compute=True))
        if d.k < d.s:
            steps.append(_Step(op.id, d.k, "allgather", G * (d.s - d.k) / d.s, after_compute=True))
    return steps


def simulate(
    plan: ExecutionPlan,
    model: ModelSpec,
    device: DeviceSpec,
    coeffs: Coefficients,
    overlap: bool = False,
) -> SimReport:
    """Run one iteration. With ``overlap`` the comm stream prefetches one step ahead
    of compute; without it every event runs back to back."""
    plan_ids = set(plan.operator_ids)
    for op in model.operators:
        if op.id not in plan_ids:
            raise SpecValidationError("plan.decisions", f"no decision for operator {op.id!r}")
    known = set(model.operator_ids)
    for op_id in plan.operator_ids:
        if op_id not in known:
            raise SpecValidationError("plan.decisions", f"unknown operator {op_id!r}")

    steps = _program(plan, model, device, coeffs)
    events: list[SimEvent] = []
    comm_free = 0.0
    compute_free = 0.0
    prev_compute_start = 0.0
    clock = 0.0  # serial mode only
    for step in steps:
        # zero-length transfers that move no memory (e.g. a single worker) are not events
        if step.comm_kind is not None and (step.comm_time > 0 or step.gather_bytes):
            if overlap:
                ready = compute_free if step.after_compute else prev_compute_start
                start = max(comm_free, ready)
            else:
                start = clock
            end = start + step.comm_time
            events.append(SimEvent(start, end, step.comm_kind, step.op_id, step.slice_index, step.gather_bytes))
            comm_free = end
            clock = end
            gathered_at = end
        else:
            gathered_at = 0.0
        if step.compute_kind is not None:
            start = max(compute_free, gathered_at) if overlap else clock
            end = start + step.compute_time
            events.append(SimEvent(start, end, step.compute_kind, step.op_id, step.slice_index))
            if step.discard:
                events.append(SimEvent(end, end, "discard", step.op_id, step.slice_index, -step.gather_bytes))
            prev_compute_start = start
            compute_free = end
            clock = end

    table = build_cost_table(
        model, device, coeffs, plan.batch_size, granularities=plan.granularities(), options=plan.cost_options
    )
    ordered = [plan.decision_map()[i] for i in table.operator_ids]
    analytic = evaluate_plan(table, device, ordered)
    base = analytic.peak_mem_bytes - max((c.transient_surge_bytes for c in _chosen(table, ordered)), default=0)

    report = SimReport(
        iter_time_s=max((e.t_end for e in events), default=0.0),
        peak_mem_bytes=0,
        timeline=events,
        base_mem_bytes=base,
        analytic_time_s=analytic.total_time_s,
        analytic_peak_bytes=analytic.peak_mem_bytes,
        overlap=overlap,
        comm_busy_s=sum(e.duration for e in events if e.resource == "comm"),
        compute_busy_s=sum(e.duration for e in events if e.resource == "compute"),
    )
    report.peak_mem_bytes = peak_memory_trace(report)
    report.exceeds_analytic_peak = report.peak_mem_bytes > analytic.peak_mem_bytes
    return report


def _chosen(table, decisions):
    for op_id, d in zip(table.operator_ids, decisions):
        yield table.cost_of(op_id, d)


def peak_memory_trace(report: SimReport) -> float:
    """Base footprint plus the largest running sum of memory deltas.

    Events are applied in time order; at equal timestamps releases go first.
    """
    deltas = sorted(
        ((e.t_start, e.mem_delta_bytes) for e in report.timeline if e.mem_delta_bytes),
        key=lambda x: (x[0], x[1] > 0),
    )
    running = 0
    high = 0
    for _, delta in deltas:
        running += delta
        high = max(high, running)
    return report.base_mem_bytes + high


def analytic_iteration_time(plan: ExecutionPlan, model: ModelSpec, device: DeviceSpec, coeffs: Coefficients) -> float:
    opts = plan.cost_options
    decisions = plan.decision_map()
    return sum(
        operator_time(op, decisions[op.id], plan.batch_size, device.n_workers, coeffs, opts.checkpoint, opts.split_penalty_s)
        for op in model.operators
    )


TRACE_FIELDS = ("t_start", "t_end", "kind", "operator_id", "slice_index", "mem_delta")


def export_trace(report: SimReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_FIELDS)
    for e in report.timeline:
        writer.writerow([repr(e.t_start), repr(e.t_end), e.kind, e.operator_id, e.slice_index, e.mem_delta_bytes])
    return buf.getvalue()


def parse_trace(text: str) -> list[SimEvent]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != TRACE_FIELDS:
        raise SpecValidationError("trace", f"expected header {','.join(TRACE_FIELDS)}")
    events = []
    for row in reader:
        if row["kind"] not in EVENT_KINDS:
            raise SpecValidationError("trace.kind", f"unknown event kind {row['kind']!r}")
        events.append(
            SimEvent(
                float(row["t_start"]),
                float(row["t_end"]),
                row["kind"],
                row["operator_id"],
                int(row["slice_index"]),
                int(row["mem_delta"]),
            )
        )
    return events

