"""Operator splitting: per-slice decisions, the split MatMul transform and its memory surge."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SpecValidationError
from .model import OperatorSpec

DEFAULT_MAX_SLICES = 16


@dataclass(frozen=True, order=True)
class Decision:
    """``zdp_slices`` of the operator's ``slice_granularity`` slices run sharded (ZDP);
    the rest keep gathered weights resident (DP)."""

    slice_granularity: int = 1
    zdp_slices: int = 0

    def __post_init__(self):
        if self.slice_granularity < 1:
            raise SpecValidationError("slice_granularity", "must be >= 1")
        if not 0 <= self.zdp_slices <= self.slice_granularity:
            raise SpecValidationError(
                "zdp_slices", f"must lie in [0, {self.slice_granularity}], got {self.zdp_slices}"
            )

    @property
    def s(self) -> int:
        return self.slice_granularity

    @property
    def k(self) -> int:
        return self.zdp_slices

    @property
    def is_pure_dp(self) -> bool:
        return self.zdp_slices == 0

    @property
    def is_pure_zdp(self) -> bool:
        return self.zdp_slices == self.slice_granularity


def check_admissible(op: OperatorSpec, d: Decision) -> None:
    if not op.splittable and d.s != 1:
        raise SpecValidationError(f"{op.id}.slice_granularity", "operator is not splittable; s must be 1")
    if op.hidden_size and d.s > op.hidden_size:
        raise SpecValidationError(
            f"{op.id}.slice_granularity", f"s={d.s} exceeds hidden size {op.hidden_size}"
        )


def slice_bounds(d: int, s: int) -> list[tuple[int, int]]:
    """Contiguous [lo, hi) blocks of an axis of length ``d``.

    Sizes differ by at most one; the trailing blocks take the remainder.
    """
    if not 1 <= s <= d:
        raise DimensionError(f"slice granularity {s} must lie in [1, {d}]")
    q, r = divmod(d, s)
    bounds = []
    lo = 0
    for i in range(s):
        hi = lo + q + (1 if i >= s - r else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def split_matmul(X: np.ndarray, W: np.ndarray, s: int) -> np.ndarray:
    """Compute ``X @ W`` as a serial sum of ``s`` partial products.

    The contraction axis is cut into contiguous blocks; partial products are
    accumulated in block order 0..s-1, so results are deterministic. ``s == 1``
    is exactly ``X @ W``.
    """
    X = np.asarray(X)
    W = np.asarray(W)
    if X.ndim != 2 or W.ndim != 2:
        raise DimensionError(f"expected 2-D operands, got {X.ndim}-D and {W.ndim}-D")
    if X.shape[1] != W.shape[0]:
        raise DimensionError(f"shapes {X.shape} and {W.shape} do not conform")
    bounds = slice_bounds(X.shape[1], s)
    lo, hi = bounds[0]
    out = X[:, lo:hi] @ W[lo:hi, :]
    for lo, hi in bounds[1:]:
        out += X[:, lo:hi] @ W[lo:hi, :]
    return out


def peak_surge(op: OperatorSpec, d: Decision) -> int:
    """Bytes momentarily held above the persistent footprint while gathering."""
    if d.k == 0:
        return 0
    return -(-op.weight_bytes // d.s)


def granularity_ladder(s_max: int) -> list[int]:
    ladder = []
    s = 1
    while s < s_max:
        ladder.append(s)
        s *= 2
    ladder.append(s_max)
    return ladder


def select_slice_granularity(op: OperatorSpec, surge_budget_bytes: float, s_max: int = DEFAULT_MAX_SLICES) -> int:
    """Smallest power-of-two slice count whose gathered slice fits ``surge_budget_bytes``.

    Falls back to ``s_max`` when no rung of the ladder fits. Unsplittable
    operators always get 1; the cap never exceeds the operator's hidden size.
    """
    if surge_budget_bytes <= 0:
        raise SpecValidationError("surge_budget_bytes", "must be > 0")
    if s_max < 1:
        raise SpecValidationError("s_max", "must be >= 1")
    if not op.splittable:
        return 1
    if op.hidden_size:
        s_max = min(s_max, op.hidden_size)
    for s in granularity_ladder(s_max):
        if -(-op.weight_bytes // s) <= surge_budget_bytes:
            return s
    return s_max
