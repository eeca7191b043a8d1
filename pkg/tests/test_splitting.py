import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shardplan.errors import DimensionError, SpecValidationError
from shardplan.model import OperatorSpec
from shardplan.splitting import (
    Decision,
    check_admissible,
    granularity_ladder,
    peak_surge,
    select_slice_granularity,
    slice_bounds,
    split_matmul,
)


def op_with_bytes(weight_bytes, **kw):
    # bytes_per_element=8 keeps param_count integral for the byte counts used here
    return OperatorSpec(id="w", param_count=weight_bytes // 8, bytes_per_element=8, **kw)


class TestDecision:
    def test_k_must_not_exceed_s(self):
        with pytest.raises(SpecValidationError):
            Decision(2, 3)
        with pytest.raises(SpecValidationError):
            Decision(0, 0)

    def test_modes(self):
        assert Decision(4, 0).is_pure_dp and Decision(4, 4).is_pure_zdp
        assert not Decision(4, 1).is_pure_dp and not Decision(4, 1).is_pure_zdp

    def test_unsplittable_needs_s1(self):
        op = OperatorSpec("x", 10, splittable=False)
        check_admissible(op, Decision(1, 1))
        with pytest.raises(SpecValidationError):
            check_admissible(op, Decision(2, 1))

    def test_s_capped_by_hidden(self):
        op = OperatorSpec("x", 10, hidden_size=4)
        check_admissible(op, Decision(4, 0))
        with pytest.raises(SpecValidationError):
            check_admissible(op, Decision(8, 0))


class TestSplitMatmul:
    def test_identity(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(split_matmul(np.eye(2), W, 2), W)

    def test_s1_bitwise(self):
        rng = np.random.default_rng(1)
        X, W = rng.standard_normal((17, 33)), rng.standard_normal((33, 9))
        assert np.array_equal(split_matmul(X, W, 1), X @ W)

    @pytest.mark.parametrize("s", [2, 3, 4, 8, 16])
    def test_random_64x96(self, s):
        rng = np.random.default_rng(s)
        X, W = rng.standard_normal((64, 96)), rng.standard_normal((96, 64))
        ref = X @ W
        dev = np.max(np.abs(split_matmul(X, W, s) - ref)) / np.max(np.abs(ref))
        assert dev <= 1e-12

    def test_serial_order_matches_manual_sum(self):
        rng = np.random.default_rng(5)
        X, W = rng.standard_normal((5, 10)), rng.standard_normal((10, 3))
        manual = X[:, 0:3] @ W[0:3] + X[:, 3:6] @ W[3:6] + X[:, 6:10] @ W[6:10]
        assert np.array_equal(split_matmul(X, W, 3), manual)

    def test_errors(self):
        with pytest.raises(DimensionError):
            split_matmul(np.ones((2, 3)), np.ones((3, 2)), 4)
        with pytest.raises(DimensionError):
            split_matmul(np.ones((2, 3)), np.ones((2, 2)), 1)
        with pytest.raises(DimensionError):
            split_matmul(np.ones(3), np.ones((3, 2)), 1)

    @given(st.integers(1, 300), st.integers(1, 32))
    def test_bounds_cover_and_balance(self, d, s):
        if s > d:
            with pytest.raises(DimensionError):
                slice_bounds(d, s)
            return
        bounds = slice_bounds(d, s)
        assert bounds[0][0] == 0 and bounds[-1][1] == d
        assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
        sizes = [hi - lo for lo, hi in bounds]
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes)


class TestSurge:
    def test_examples(self):
        op = op_with_bytes(4_000_000)
        assert peak_surge(op, Decision(1, 1)) == 4_000_000
        assert peak_surge(op, Decision(8, 1)) == 500_000
        assert peak_surge(op, Decision(8, 5)) == 500_000
        assert peak_surge(op, Decision(8, 0)) == 0

    def test_uneven_rounds_up(self):
        op = OperatorSpec("w", 10, bytes_per_element=1)
        assert peak_surge(op, Decision(3, 1)) == 4

    @given(st.integers(1, 10**12), st.integers(1, 64), st.integers(1, 64))
    def test_non_increasing_in_s_and_flat_in_k(self, params, s, k):
        op = OperatorSpec("w", params, bytes_per_element=4)
        k = min(k, s)
        assert peak_surge(op, Decision(s, k)) == peak_surge(op, Decision(s, 1))
        assert peak_surge(op, Decision(s + 1, 1)) <= peak_surge(op, Decision(s, 1))


class TestGranularity:
    def test_examples(self):
        assert select_slice_granularity(op_with_bytes(4_000_000), 4e6) == 1
        assert select_slice_granularity(op_with_bytes(4_000_000), 1e6, 16) == 4
        assert select_slice_granularity(op_with_bytes(1_000_000_000), 1e6, 16) == 16

    def test_ladder(self):
        assert granularity_ladder(16) == [1, 2, 4, 8, 16]
        assert granularity_ladder(6) == [1, 2, 4, 6]
        assert granularity_ladder(1) == [1]

    def test_unsplittable_and_hidden_cap(self):
        assert select_slice_granularity(OperatorSpec("x", 10**9, splittable=False), 1.0) == 1
        assert select_slice_granularity(OperatorSpec("x", 10**9, hidden_size=4), 1.0, 16) == 4

    def test_bad_arguments(self):
        with pytest.raises(SpecValidationError):
            select_slice_granularity(op_with_bytes(8), 0)
        with pytest.raises(SpecValidationError):
            select_slice_granularity(op_with_bytes(8), 1, s_max=0)

    @given(st.integers(1, 10**10), st.floats(1, 1e10), st.floats(1, 1e10), st.sampled_from([1, 4, 6, 16, 32]))
    def test_monotone_in_budget(self, wb, b1, b2, s_max):
        op = OperatorSpec("w", wb, bytes_per_element=1)
        lo, hi = sorted((b1, b2))
        assert select_slice_granularity(op, lo, s_max) >= select_slice_granularity(op, hi, s_max)
