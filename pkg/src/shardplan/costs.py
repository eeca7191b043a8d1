"""Analytic time/memory cost of each operator under each sharding decision.

All arithmetic is written so that passing ``fractions.Fraction`` coefficients
keeps every result exact; floats work as usual.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import nnls

from .errors import CalibrationMissing, SpecParseError, SpecValidationError, UnderdeterminedFit
from .model import DeviceSpec, ModelSpec, OperatorSpec, _as_int, _as_number, _check_keys, _loads, _require
from .splitting import Decision, check_admissible, peak_surge

logger = logging.getLogger(__name__)

DEFAULT_CHECKPOINT_FRACTION = 0.1


@dataclass(frozen=True)
class Coefficients:
    alpha_s: float
    beta_s_per_byte: float
    gamma_per_op: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("alpha_s", "beta_s_per_byte"):
            if getattr(self, name) < 0:
                raise SpecValidationError(name, "must be >= 0")
        for op_id, g in self.gamma_per_op.items():
            if g < 0:
                raise SpecValidationError(f"gamma_per_op.{op_id}", "must be >= 0")

    @classmethod
    def from_device(cls, model: ModelSpec, device: DeviceSpec) -> "Coefficients":
        """Per-operator gamma = FLOPs per sample x device seconds per FLOP."""
        return cls(
            alpha_s=device.alpha_s,
            beta_s_per_byte=device.beta_s_per_byte,
            gamma_per_op={op.id: op.flops_per_sample * device.gamma_s_per_flop for op in model.operators},
        )

    def gamma(self, op_id: str) -> float:
        try:
            return self.gamma_per_op[op_id]
        except KeyError:
            raise CalibrationMissing(op_id) from None

    def to_dict(self) -> dict:
        return {
            "alpha_s": self.alpha_s,
            "beta_s_per_byte": self.beta_s_per_byte,
            "gamma_per_op": dict(self.gamma_per_op),
        }


def coefficients_from_dict(data) -> Coefficients:
    if not isinstance(data, dict):
        raise SpecParseError("coefficients file must be a JSON object")
    _check_keys(data, ("alpha_s", "beta_s_per_byte", "gamma_per_op"), "")
    gammas = _require(data, "gamma_per_op", "")
    if not isinstance(gammas, dict):
        raise SpecValidationError("gamma_per_op", "must be an object")
    return Coefficients(
        alpha_s=_as_number(_require(data, "alpha_s", ""), "alpha_s"),
        beta_s_per_byte=_as_number(_require(data, "beta_s_per_byte", ""), "beta_s_per_byte"),
        gamma_per_op={k: _as_number(v, f"gamma_per_op.{k}") for k, v in gammas.items()},
    )


def parse_coefficients(text: str) -> Coefficients:
    return coefficients_from_dict(_loads(text))


def dump_coefficients(coeffs: Coefficients) -> str:
    return json.dumps(coeffs.to_dict(), indent=2)


@dataclass(frozen=True)
class CostOptions:
    checkpoint: bool = False
    checkpoint_activation_fraction: float = DEFAULT_CHECKPOINT_FRACTION
    # seconds charged per extra slice; 0 assumes splitting is hidden behind communication
    split_penalty_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "checkpoint_activation_fraction": self.checkpoint_activation_fraction,
            "split_penalty_s": self.split_penalty_s,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CostOptions":
        return cls(
            checkpoint=bool(data.get("checkpoint", False)),
            checkpoint_activation_fraction=data.get("checkpoint_activation_fraction", DEFAULT_CHECKPOINT_FRACTION),
            split_penalty_s=data.get("split_penalty_s", 0.0),
        )


# ---------------------------------------------------------------------------
# time
# ---------------------------------------------------------------------------


def allgather_time(size_bytes, N: int, coeffs):
    """Ring all-gather: N-1 steps, each moving size/N bytes."""
    steps = N - 1
    return steps * coeffs.alpha_s + steps * coeffs.beta_s_per_byte * size_bytes / N


# ring reduce-scatter has the same step count and per-step volume
reduce_scatter_time = allgather_time


def comm_time(op: OperatorSpec, d: Decision, N: int, coeffs, checkpoint: bool = False):
    """Per-iteration communication: forward gather + gradient reduce-scatter, plus
    the backward re-gather prorated over the ZDP slices (twice under checkpoint)."""
    G = allgather_time(op.weight_bytes, N, coeffs)
    regather = G * d.k / d.s
    if checkpoint:
        return 2 * G + 2 * regather
    return 2 * G + regather


def compute_time(op: OperatorSpec, d: Decision, b, coeffs, checkpoint: bool = False, split_penalty_s=0):
    t = b * coeffs.gamma(op.id)
    if checkpoint:
        t = 2 * t
    if split_penalty_s:
        t = t + (d.s - 1) * split_penalty_s
    return t


def operator_time(
    op: OperatorSpec,
    d: Decision,
    b,
    N: int,
    coeffs,
    checkpoint: bool = False,
    split_penalty_s=0,
):
    """Iteration time of one operator: DP pays 2 all-gather-equivalents, ZDP pays 3,
    mixed decisions interpolate linearly in the number of ZDP slices."""
    G = allgather_time(op.weight_bytes, N, coeffs)
    compute = b * coeffs.gamma(op.id)
    t = 2 * G + compute + G * d.k / d.s
    if checkpoint:
        t = t + G * d.k / d.s + compute
    if split_penalty_s:
        t = t + (d.s - 1) * split_penalty_s
    return t


# ---------------------------------------------------------------------------
# memory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryCost:
    state_bytes: float
    activation_bytes: float
    transient_surge_bytes: float

    @property
    def persistent_bytes(self):
        return self.state_bytes + self.activation_bytes


def model_state_bytes(op: OperatorSpec, d: Decision, N: int, bytes_per_param_state):
    # DP slices keep full states, ZDP slices keep 1/N
    return bytes_per_param_state * op.param_count * ((d.s - d.k) * N + d.k) / (d.s * N)


def activation_bytes(op: OperatorSpec, b, checkpoint: bool = False, fraction=DEFAULT_CHECKPOINT_FRACTION):
    per_sample = op.activation_bytes_per_sample
    if isinstance(b, Fraction):
        per_sample = Fraction(per_sample)
    a = per_sample * b
    return fraction * a if checkpoint else a


def operator_memory(
    op: OperatorSpec,
    d: Decision,
    b,
    N: int,
    device: DeviceSpec,
    checkpoint: bool = False,
    checkpoint_fraction=DEFAULT_CHECKPOINT_FRACTION,
) -> MemoryCost:
    return MemoryCost(
        state_bytes=model_state_bytes(op, d, N, device.bytes_per_param_state),
        activation_bytes=activation_bytes(op, b, checkpoint, checkpoint_fraction),
        transient_surge_bytes=peak_surge(op, d),
    )


# ---------------------------------------------------------------------------
# cost table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionCost:
    time_s: float
    persistent_bytes: float
    transient_surge_bytes: float = 0


@dataclass
class CostTable:
    """Per-operator candidate decisions with their cost at one batch size.

    ``entries`` preserves model operator order; each list is ordered by
    increasing ``zdp_slices``.
    """

    batch_size: int
    entries: dict[str, list[tuple[Decision, DecisionCost]]]

    @property
    def operator_ids(self) -> list[str]:
        return list(self.entries)

    def __len__(self):
        return len(self.entries)

    def validate(self) -> None:
        if not self.entries:
            raise SpecValidationError("entries", "cost table is empty")
        for op_id, options in self.entries.items():
            if len(options) < 2:
                raise SpecValidationError(op_id, "needs at least the pure-DP and pure-ZDP entries")
            for (d0, c0), (d1, c1) in zip(options, options[1:]):
                if d1.k <= d0.k:
                    raise SpecValidationError(op_id, "entries must be ordered by increasing k")
                if c1.time_s < c0.time_s:
                    raise SpecValidationError(op_id, f"time decreases from k={d0.k} to k={d1.k}")
                if c1.persistent_bytes > c0.persistent_bytes:
                    raise SpecValidationError(op_id, f"persistent memory grows from k={d0.k} to k={d1.k}")

    def cost_of(self, op_id: str, d: Decision) -> DecisionCost:
        for dd, c in self.entries[op_id]:
            if dd == d:
                return c
        raise KeyError((op_id, d))


def _exact_coefficients(coeffs: Coefficients) -> Coefficients:
    return Coefficients(
        alpha_s=Fraction(coeffs.alpha_s),
        beta_s_per_byte=Fraction(coeffs.beta_s_per_byte),
        gamma_per_op={k: Fraction(v) for k, v in coeffs.gamma_per_op.items()},
    )


def _exact_device(device: DeviceSpec) -> DeviceSpec:
    return replace(device, bytes_per_param_state=Fraction(device.bytes_per_param_state))


def build_cost_table(
    model: ModelSpec,
    device: DeviceSpec,
    coeffs: Coefficients,
    b: int,
    checkpoint: bool = False,
    granularities: Mapping[str, int] | None = None,
    options: CostOptions | None = None,
    exact: bool = True,
) -> CostTable:
    """Cost of every k in [0, s] for every operator at batch size ``b``.

    With ``exact`` (the default) entries are ``Fraction`` values computed from
    the exact binary value of every float input, so entries that are equal in
    real arithmetic compare equal; the search depends on this to recognise ties.
    """
    if exact:
        coeffs = _exact_coefficients(coeffs)
        device = _exact_device(device)
        b = Fraction(b)
    if options is None:
        options = CostOptions(checkpoint=checkpoint)
    elif checkpoint and not options.checkpoint:
        options = CostOptions(True, options.checkpoint_activation_fraction, options.split_penalty_s)
    fraction = Fraction(options.checkpoint_activation_fraction) if exact else options.checkpoint_activation_fraction
    penalty = Fraction(options.split_penalty_s) if exact else options.split_penalty_s
    granularities = granularities or {}
    N = device.n_workers
    entries = {}
    for op in model.operators:
        s = granularities.get(op.id, 1)
        check_admissible(op, Decision(s, 0))
        options_for_op = []
        for k in range(s + 1):
            d = Decision(s, k)
            mem = operator_memory(op, d, b, N, device, options.checkpoint, fraction)
            t = operator_time(op, d, b, N, coeffs, options.checkpoint, penalty)
            options_for_op.append((d, DecisionCost(t, mem.persistent_bytes, mem.transient_surge_bytes)))
        entries[op.id] = options_for_op
    table = CostTable(batch_size=int(b), entries=entries)
    table.validate()
    return table


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementRecord:
    operator_id: str
    decision: Decision
    batch_size: float
    measured_time_s: float

    def __post_init__(self):
        if not self.measured_time_s > 0:
            raise SpecValidationError("measured_time_s", f"must be > 0, got {self.measured_time_s}")


def measurements_from_list(data) -> list[MeasurementRecord]:
    if not isinstance(data, list):
        raise SpecParseError("measurement file must be a JSON list")
    records = []
    for i, raw in enumerate(data):
        where = f"[{i}]"
        if not isinstance(raw, dict):
            raise SpecValidationError(where, "must be an object")
        _check_keys(raw, ("operator_id", "s", "k", "batch_size", "measured_time_s"), where)
        op_id = _require(raw, "operator_id", where)
        if not isinstance(op_id, str):
            raise SpecValidationError(f"{where}.operator_id", "must be a string")
        s = _as_int(raw.get("s", 1), f"{where}.s", minimum=1)
        k = _as_int(_require(raw, "k", where), f"{where}.k")
        if k > s:
            raise SpecValidationError(f"{where}.k", f"must be <= s={s}")
        b = _as_number(_require(raw, "batch_size", where), f"{where}.batch_size")
        t = _as_number(_require(raw, "measured_time_s", where), f"{where}.measured_time_s")
        if t <= 0:
            raise SpecValidationError(f"{where}.measured_time_s", "must be > 0")
        records.append(MeasurementRecord(op_id, Decision(s, k), b, t))
    return records


def parse_measurements(text: str) -> list[MeasurementRecord]:
    return measurements_from_list(_loads(text))


def dump_measurements(records: Sequence[MeasurementRecord]) -> str:
    return json.dumps(
        [
            {
                "operator_id": r.operator_id,
                "s": r.decision.s,
                "k": r.decision.k,
                "batch_size": r.batch_size,
                "measured_time_s": r.measured_time_s,
            }
            for r in records
        ],
        indent=2,
    )


_PINNABLE = ("alpha_s", "beta_s_per_byte")


def fit_coefficients(
    measurements: Sequence[MeasurementRecord],
    model: ModelSpec,
    N: int,
    pinned: Mapping[str, float] | None = None,
    rcond: float = 1e-10,
) -> Coefficients:
    """Least-squares estimate of (alpha, beta, gamma per operator) from measured times.

    Every measured operator gets its own gamma. ``pinned`` fixes ``alpha_s``
    and/or ``beta_s_per_byte`` to known values, which is how to calibrate from
    measurements that cover a single message size (where latency and bandwidth
    cannot be told apart). When the unconstrained least-squares solution has a
    negative entry, the fit is redone as non-negative least squares.
    """
    pinned = dict(pinned or {})
    for name in pinned:
        if name not in _PINNABLE:
            raise SpecValidationError(f"pinned.{name}", f"only {_PINNABLE} can be pinned")
    if not measurements:
        raise UnderdeterminedFit(["no measurements"])
    ops = {op.id: op for op in model.operators}
    op_ids: list[str] = []
    for r in measurements:
        if r.operator_id not in ops:
            raise SpecValidationError("operator_id", f"unknown operator {r.operator_id!r}")
        if r.operator_id not in op_ids:
            op_ids.append(r.operator_id)

    names = [n for n in _PINNABLE if n not in pinned] + [f"gamma[{i}]" for i in op_ids]
    n_shared = len(names) - len(op_ids)
    A = np.zeros((len(measurements), len(names)))
    y = np.zeros(len(measurements))
    for row, r in enumerate(measurements):
        op = ops[r.operator_id]
        gathers = 2 + r.decision.k / r.decision.s
        alpha_col = (N - 1) * gathers
        beta_col = (N - 1) / N * op.weight_bytes * gathers
        target = r.measured_time_s
        cols = {"alpha_s": alpha_col, "beta_s_per_byte": beta_col}
        for name in _PINNABLE:
            if name in pinned:
                target -= pinned[name] * cols[name]
        j = 0
        for name in _PINNABLE:
            if name not in pinned:
                A[row, j] = cols[name]
                j += 1
        A[row, n_shared + op_ids.index(r.operator_id)] = r.batch_size
        y[row] = target

    scale = np.linalg.norm(A, axis=0)
    missing = []
    for j, name in enumerate(names):
        if scale[j] == 0:
            missing.append(f"{name} has no effect on any measurement (N=1 or zero-size operators)")
    if missing:
        raise UnderdeterminedFit(missing)
    An = A / scale
    _, sv, vt = np.linalg.svd(An, full_matrices=True)
    rank = int(np.sum(sv > rcond * sv[0]))
    if rank < len(names):
        null = vt[rank:]
        loose = [names[j] for j in range(len(names)) if np.abs(null[:, j]).max() > 1e-8]
        raise UnderdeterminedFit(_explain(loose))
    sol, *_ = np.linalg.lstsq(An, y, rcond=None)
    if np.any(sol < 0):
        # the unconstrained optimum is not admissible; solve with x >= 0 instead
        logger.warning("fit constrained to >= 0 for %s", [names[j] for j in np.flatnonzero(sol < 0)])
        sol, _ = nnls(An, y)
    sol = sol / scale
    values = dict(zip(names, sol.tolist()))
    values.update(pinned)
    return Coefficients(
        alpha_s=values["alpha_s"],
        beta_s_per_byte=values["beta_s_per_byte"],
        gamma_per_op={i: values[f"gamma[{i}]"] for i in op_ids},
    )


def _explain(loose: Iterable[str]) -> list[str]:
    loose = list(loose)
    msgs = []
    if "alpha_s" in loose and "beta_s_per_byte" in loose:
        msgs.append(
            "alpha_s and beta_s_per_byte are indistinguishable: measurements need operators "
            "of at least two different sizes, or pin one of them"
        )
    gammas = [n for n in loose if n.startswith("gamma[")]
    if gammas:
        msgs.append(
            f"{', '.join(gammas)} need more variation: measure at a second batch size or a second decision"
        )
    if not msgs:
        msgs.append(f"not identifiable: {', '.join(loose)}")
    return msgs


def synthesize_measurements(
    model: ModelSpec,
    N: int,
    coeffs: Coefficients,
    batch_sizes: Sequence[int] = (1, 2, 4),
    slices: int = 4,
    noise: float = 0.0,
    seed: int = 0,
) -> list[MeasurementRecord]:
    """Measurements generated by the cost model itself, optionally with
    multiplicative Gaussian noise of relative std ``noise``."""
    rng = random.Random(seed)
    records = []
    for op in model.operators:
        s = slices if op.splittable and (not op.hidden_size or slices <= op.hidden_size) else 1
        for b in batch_sizes:
            for k in range(s + 1):
                d = Decision(s, k)
                t = operator_time(op, d, b, N, coeffs)
                if noise:
                    t *= 1.0 + rng.gauss(0.0, noise)
                records.append(MeasurementRecord(op.id, d, b, max(t, 1e-12)))
    return records
