"""Model and device descriptions, their JSON file formats, and synthetic model families."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Any, Sequence

from .errors import SpecParseError, SpecValidationError

DEFAULT_SEQUENCE_LENGTH = 512
DEFAULT_BYTES_PER_PARAM_STATE = 16
ALLOWED_ELEMENT_WIDTHS = (2, 4, 8)


@dataclass(frozen=True)
class OperatorSpec:
    id: str
    param_count: int
    bytes_per_element: int = 4
    activation_bytes_per_sample: float = 0
    flops_per_sample: float = 0
    splittable: bool = True
    hidden_size: int = 0

    @property
    def weight_bytes(self) -> int:
        return self.param_count * self.bytes_per_element


@dataclass(frozen=True)
class ModelSpec:
    name: str
    operators: tuple[OperatorSpec, ...]
    sequence_length: int = DEFAULT_SEQUENCE_LENGTH

    def __post_init__(self):
        # accept any sequence but store a tuple so the model stays hashable/immutable
        object.__setattr__(self, "operators", tuple(self.operators))

    def operator(self, op_id: str) -> OperatorSpec:
        for op in self.operators:
            if op.id == op_id:
                return op
        raise KeyError(op_id)

    @property
    def operator_ids(self) -> list[str]:
        return [op.id for op in self.operators]


@dataclass(frozen=True)
class DeviceSpec:
    n_workers: int
    mem_limit_bytes: float
    alpha_s: float
    beta_s_per_byte: float
    gamma_s_per_flop: float
    bytes_per_param_state: float = DEFAULT_BYTES_PER_PARAM_STATE
    fixed_overhead_bytes: float = 0


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SpecValidationError(f"{where}.{key}" if where else key, "missing required field")
    return obj[key]


def _check_keys(obj: dict, allowed: Sequence[str], where: str):
    for key in obj:
        if key not in allowed:
            raise SpecValidationError(f"{where}.{key}" if where else key, "unknown field")


def _as_int(value: Any, field: str, minimum: int | None = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecValidationError(field, f"expected an integer, got {value!r}")
    if isinstance(value, float):
        if not value.is_integer():
            raise SpecValidationError(field, f"expected an integer, got {value!r}")
        value = int(value)
    if minimum is not None and value < minimum:
        raise SpecValidationError(field, f"must be >= {minimum}, got {value}")
    return value


def _as_number(value: Any, field: str, minimum: float | None = 0) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecValidationError(field, f"expected a number, got {value!r}")
    if value != value:  # NaN
        raise SpecValidationError(field, "must not be NaN")
    if minimum is not None and value < minimum:
        raise SpecValidationError(field, f"must be >= {minimum}, got {value}")
    return value


def _as_bool(value: Any, field: str) -> bool:
    if not isinstance(value, bool):
        raise SpecValidationError(field, f"expected true/false, got {value!r}")
    return value


def _loads(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecParseError(exc.msg, exc.lineno, exc.colno) from None


def default_flops_per_sample(param_count: int, sequence_length: int) -> int:
    return 2 * param_count * sequence_length


def default_activation_bytes(hidden_size: int, sequence_length: int, bytes_per_element: int) -> int:
    return 2 * hidden_size * sequence_length * bytes_per_element


_OPERATOR_FIELDS = (
    "id",
    "param_count",
    "bytes_per_element",
    "activation_bytes_per_sample",
    "flops_per_sample",
    "splittable",
    "hidden_size",
)


def _operator_from_dict(raw: Any, sequence_length: int, where: str) -> OperatorSpec:
    if not isinstance(raw, dict):
        raise SpecValidationError(where, "operator entry must be an object")
    _check_keys(raw, _OPERATOR_FIELDS, where)
    op_id = _require(raw, "id", where)
    if not isinstance(op_id, str) or not op_id:
        raise SpecValidationError(f"{where}.id", "must be a non-empty string")
    param_count = _as_int(_require(raw, "param_count", where), f"{where}.param_count")
    width = _as_int(raw.get("bytes_per_element", 4), f"{where}.bytes_per_element")
    if width not in ALLOWED_ELEMENT_WIDTHS:
        raise SpecValidationError(f"{where}.bytes_per_element", f"must be one of {ALLOWED_ELEMENT_WIDTHS}")
    hidden = _as_int(raw.get("hidden_size", 0), f"{where}.hidden_size")
    splittable = _as_bool(raw.get("splittable", True), f"{where}.splittable")
    if "activation_bytes_per_sample" in raw:
        act = _as_number(raw["activation_bytes_per_sample"], f"{where}.activation_bytes_per_sample")
    else:
        act = default_activation_bytes(hidden, sequence_length, width)
    if "flops_per_sample" in raw:
        flops = _as_number(raw["flops_per_sample"], f"{where}.flops_per_sample")
    else:
        flops = default_flops_per_sample(param_count, sequence_length)
    return OperatorSpec(
        id=op_id,
        param_count=param_count,
        bytes_per_element=width,
        activation_bytes_per_sample=act,
        flops_per_sample=flops,
        splittable=splittable,
        hidden_size=hidden,
    )


def model_from_dict(data: Any) -> ModelSpec:
    if not isinstance(data, dict):
        raise SpecParseError("model spec must be a JSON object")
    _check_keys(data, ("name", "sequence_length", "operators"), "")
    name = data.get("name", "model")
    if not isinstance(name, str):
        raise SpecValidationError("name", "must be a string")
    seq = _as_int(data.get("sequence_length", DEFAULT_SEQUENCE_LENGTH), "sequence_length", minimum=1)
    raw_ops = _require(data, "operators", "")
    if not isinstance(raw_ops, list):
        raise SpecValidationError("operators", "must be a list")
    if not raw_ops:
        raise SpecValidationError("operators", "must contain at least one operator")
    ops = [_operator_from_dict(raw, seq, f"operators[{i}]") for i, raw in enumerate(raw_ops)]
    seen = set()
    for i, op in enumerate(ops):
        if op.id in seen:
            raise SpecValidationError(f"operators[{i}].id", f"duplicate operator id {op.id!r}")
        seen.add(op.id)
    return ModelSpec(name=name, operators=tuple(ops), sequence_length=seq)


def parse_model_spec(text: str) -> ModelSpec:
    """Parse and validate a model spec file.

    Optional per-operator fields (``activation_bytes_per_sample``,
    ``flops_per_sample``) are filled from ``hidden_size`` and the model's
    ``sequence_length`` when absent.
    """
    return model_from_dict(_loads(text))


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "name": model.name,
        "sequence_length": model.sequence_length,
        "operators": [
            {
                "id": op.id,
                "param_count": op.param_count,
                "bytes_per_element": op.bytes_per_element,
                "activation_bytes_per_sample": op.activation_bytes_per_sample,
                "flops_per_sample": op.flops_per_sample,
                "splittable": op.splittable,
                "hidden_size": op.hidden_size,
            }
            for op in model.operators
        ],
    }


def dump_model_spec(model: ModelSpec) -> str:
    return json.dumps(model_to_dict(model), indent=2)


_DEVICE_FIELDS = (
    "n_workers",
    "mem_limit_bytes",
    "alpha_s",
    "beta_s_per_byte",
    "gamma_s_per_flop",
    "bytes_per_param_state",
    "fixed_overhead_bytes",
)


def device_from_dict(data: Any) -> DeviceSpec:
    if not isinstance(data, dict):
        raise SpecParseError("device spec must be a JSON object")
    _check_keys(data, _DEVICE_FIELDS, "")
    n_workers = _as_int(_require(data, "n_workers", ""), "n_workers", minimum=1)
    mem_limit = _as_number(_require(data, "mem_limit_bytes", ""), "mem_limit_bytes")
    if mem_limit <= 0:
        raise SpecValidationError("mem_limit_bytes", "must be > 0")
    return DeviceSpec(
        n_workers=n_workers,
        mem_limit_bytes=mem_limit,
        alpha_s=_as_number(_require(data, "alpha_s", ""), "alpha_s"),
        beta_s_per_byte=_as_number(_require(data, "beta_s_per_byte", ""), "beta_s_per_byte"),
        gamma_s_per_flop=_as_number(_require(data, "gamma_s_per_flop", ""), "gamma_s_per_flop"),
        bytes_per_param_state=_as_number(
            data.get("bytes_per_param_state", DEFAULT_BYTES_PER_PARAM_STATE), "bytes_per_param_state"
        ),
        fixed_overhead_bytes=_as_number(data.get("fixed_overhead_bytes", 0), "fixed_overhead_bytes"),
    )


def parse_device_spec(text: str) -> DeviceSpec:
    return device_from_dict(_loads(text))


def device_to_dict(device: DeviceSpec) -> dict:
    return {name: getattr(device, name) for name in _DEVICE_FIELDS}


def dump_device_spec(device: DeviceSpec) -> str:
    return json.dumps(device_to_dict(device), indent=2)


# ---------------------------------------------------------------------------
# synthetic families
# ---------------------------------------------------------------------------

FAMILIES = ("ND", "WS", "IC")


def _block(index: int, hidden: int, seq: int, width: int) -> list[OperatorSpec]:
    ops = []
    # attention: Q, K, V, O projections; mlp: two projections with 4x expansion
    for suffix, params in (("attn", 4 * hidden * hidden), ("mlp", 8 * hidden * hidden)):
        ops.append(
            OperatorSpec(
                id=f"block{index}.{suffix}",
                param_count=params,
                bytes_per_element=width,
                activation_bytes_per_sample=default_activation_bytes(hidden, seq, width),
                flops_per_sample=default_flops_per_sample(params, seq),
                splittable=True,
                hidden_size=hidden,
            )
        )
    return ops


def generate_family(
    kind: str,
    layers: int | None = None,
    hidden: int | Sequence[int] = 1024,
    sequence_length: int = DEFAULT_SEQUENCE_LENGTH,
    bytes_per_element: int = 4,
) -> ModelSpec:
    """Build a stack of transformer blocks, two operators (attn, mlp) per block.

    ``ND`` and ``WS`` take one hidden size shared by every block; ``IC`` takes a
    per-layer list. For ``IC``, ``layers`` may be omitted (one layer per entry)
    or be a multiple of the list length, in which case each size covers a
    contiguous stage of ``layers // len(hidden)`` blocks.
    """
    kind = kind.upper()
    if kind not in FAMILIES:
        raise SpecValidationError("kind", f"must be one of {FAMILIES}, got {kind!r}")
    if kind == "IC":
        if isinstance(hidden, int):
            raise SpecValidationError("hidden", "IC needs a per-layer list of hidden sizes")
        sizes = list(hidden)
        if not sizes:
            raise SpecValidationError("layers", "must be >= 1")
        if layers is not None:
            if layers < 1 or layers % len(sizes):
                raise SpecValidationError(
                    "layers", f"{layers} layers cannot be split into stages of {len(sizes)} hidden sizes"
                )
            per_stage = layers // len(sizes)
            sizes = [h for h in sizes for _ in range(per_stage)]
        name = "ic-" + "-".join(f"{h}x{len(list(run))}" for h, run in itertools.groupby(sizes))
    else:
        if not isinstance(hidden, int):
            raise SpecValidationError("hidden", f"{kind} takes a single hidden size")
        if layers is None or layers < 1:
            raise SpecValidationError("layers", "must be >= 1")
        sizes = [hidden] * layers
        name = f"{kind.lower()}-{layers}x{hidden}"
    for i, h in enumerate(sizes):
        if h < 1:
            raise SpecValidationError(f"hidden[{i}]", "must be >= 1")
    if sequence_length < 1:
        raise SpecValidationError("sequence_length", "must be >= 1")
    ops = []
    for i, h in enumerate(sizes):
        ops.extend(_block(i, h, sequence_length, bytes_per_element))
    return ModelSpec(name=name, operators=tuple(ops), sequence_length=sequence_length)
