"""Shared builders for randomized planner instances."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace

import pytest

from shardplan.costs import Coefficients, CostOptions, CostTable, build_cost_table
from shardplan.model import DeviceSpec, ModelSpec, OperatorSpec
from shardplan.scheduler import ExecutionPlan
from shardplan.search import PlanCandidate, baseline_plans, min_peak_memory

# keeps brute force well under a second per instance
MAX_VECTORS = 300_000


@dataclass
class Instance:
    model: ModelSpec
    device: DeviceSpec
    coeffs: Coefficients
    batch_size: int
    granularities: dict[str, int]
    options: CostOptions
    table: CostTable

    def execution_plan(self, cand: PlanCandidate) -> ExecutionPlan:
        return ExecutionPlan(
            operator_ids=cand.operator_ids,
            decisions=cand.decisions,
            batch_size=self.batch_size,
            iter_time_s=cand.total_time_s,
            peak_mem_bytes=cand.peak_mem_bytes,
            throughput_samples_per_s=self.batch_size / cand.total_time_s,
            cost_options=self.options,
        )


def random_model(rng: random.Random, max_ops: int = 12, max_slices: int = 4, name: str = "rand"):
    """Operators with random sizes and a random slice count each (so 2..5 decisions)."""
    while True:
        n = rng.randint(1, max_ops)
        grans = [rng.randint(1, max_slices) for _ in range(n)]
        if math.prod(g + 1 for g in grans) <= MAX_VECTORS:
            break
    ops = []
    for i in range(n):
        hidden = rng.choice([16, 32, 64, 96, 128, 256])
        params = rng.randint(1, 12) * hidden * hidden
        ops.append(
            OperatorSpec(
                id=f"op{i}",
                param_count=params,
                bytes_per_element=rng.choice([2, 4]),
                activation_bytes_per_sample=rng.randint(0, 40) * hidden * 64,
                flops_per_sample=2 * params * rng.choice([64, 128, 512]),
                hidden_size=hidden,
            )
        )
    model = ModelSpec(name=name, operators=tuple(ops), sequence_length=64)
    return model, {f"op{i}": g for i, g in enumerate(grans)}


def random_instance(rng: random.Random, max_ops: int = 12, checkpoint: bool | None = None) -> Instance:
    """Random model, device and batch size; the memory limit is drawn between
    slightly below the least achievable peak and slightly above all-DP."""
    model, grans = random_model(rng, max_ops=max_ops)
    if checkpoint is None:
        checkpoint = rng.random() < 0.25
    options = CostOptions(checkpoint=checkpoint)
    N = rng.choice([2, 4, 8])
    device = DeviceSpec(
        n_workers=N,
        mem_limit_bytes=1,
        alpha_s=rng.choice([0.0, 1e-6, 1e-5]),
        beta_s_per_byte=rng.uniform(1e-11, 1e-9),
        gamma_s_per_flop=rng.uniform(1e-14, 1e-12),
        bytes_per_param_state=rng.choice([8, 16]),
        fixed_overhead_bytes=rng.choice([0, 1 << 20]),
    )
    coeffs = Coefficients.from_device(model, device)
    b = rng.randint(1, 8)
    probe = build_cost_table(model, device, coeffs, b, granularities=grans, options=options)
    low = min_peak_memory(probe, device)
    high = baseline_plans(probe, device)[0].peak_mem_bytes
    limit = int(rng.uniform(0.97 * low, 1.03 * max(high, low)))
    device = replace(device, mem_limit_bytes=limit)
    table = build_cost_table(model, device, coeffs, b, granularities=grans, options=options)
    return Instance(model, device, coeffs, b, grans, options, table)


@pytest.fixture
def rng():
    return random.Random(20240611)
