import json
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardplan.costs import (
    Coefficients,
    CostOptions,
    MeasurementRecord,
    activation_bytes,
    allgather_time,
    build_cost_table,
    comm_time,
    dump_coefficients,
    dump_measurements,
    fit_coefficients,
    model_state_bytes,
    operator_memory,
    operator_time,
    parse_coefficients,
    parse_measurements,
    reduce_scatter_time,
    synthesize_measurements,
)
from shardplan.errors import CalibrationMissing, SpecParseError, SpecValidationError, UnderdeterminedFit
from shardplan.model import DeviceSpec, ModelSpec, OperatorSpec, generate_family
from shardplan.splitting import Decision

F = Fraction


def coeffs_for(op_id="w", alpha=F(1, 10**5), beta=F(1, 10**9), gamma=F(1, 10**3)):
    return Coefficients(alpha_s=alpha, beta_s_per_byte=beta, gamma_per_op={op_id: gamma})


def op_4mb(**kw):
    return OperatorSpec(id="w", param_count=1_000_000, bytes_per_element=4, **kw)


# independent oracle: the same model written out term by term over exact rationals
def oracle_time(weight_bytes, s, k, b, N, alpha, beta, gamma, checkpoint=False):
    steps = N - 1
    gathers = F(2) + F(k, s) + (F(k, s) if checkpoint else 0)
    per_gather = steps * alpha + steps * F(weight_bytes, N) * beta
    return gathers * per_gather + b * gamma * (2 if checkpoint else 1)


class TestAllgather:
    def test_examples(self):
        c = coeffs_for()
        assert allgather_time(4_000_000, 4, c) == F(303, 100_000)
        assert allgather_time(4_000_000, 4, Coefficients(1e-5, 1e-9)) == pytest.approx(3.03e-3, rel=1e-12)
        assert allgather_time(123456, 1, c) == 0
        assert allgather_time(0, 8, c) == F(7, 100_000)

    def test_reduce_scatter_same_formula(self):
        c = coeffs_for()
        for size in (0, 1, 10**6):
            for n in (1, 2, 8):
                assert reduce_scatter_time(size, n, c) == allgather_time(size, n, c)


class TestOperatorTime:
    def test_examples(self):
        op, c = op_4mb(), coeffs_for()
        t_d = operator_time(op, Decision(1, 0), 1, 4, c)
        t_z = operator_time(op, Decision(1, 1), 1, 4, c)
        assert t_d == F(706, 100_000)
        assert t_z == F(1009, 100_000)
        assert t_z - t_d == allgather_time(op.weight_bytes, 4, c)
        assert operator_time(op, Decision(4, 2), 1, 4, c) == F(8575, 1_000_000)

    def test_float_inputs(self):
        op = op_4mb()
        c = Coefficients(1e-5, 1e-9, {"w": 1e-3})
        assert operator_time(op, Decision(1, 0), 1, 4, c) == pytest.approx(7.06e-3, rel=1e-12)
        assert operator_time(op, Decision(1, 1), 1, 4, c) == pytest.approx(1.009e-2, rel=1e-12)

    def test_missing_gamma(self):
        with pytest.raises(CalibrationMissing):
            operator_time(op_4mb(), Decision(1, 0), 1, 4, coeffs_for("other"))

    def test_split_penalty(self):
        op, c = op_4mb(), coeffs_for()
        base = operator_time(op, Decision(4, 1), 1, 4, c)
        assert operator_time(op, Decision(4, 1), 1, 4, c, split_penalty_s=F(1, 100)) == base + F(3, 100)

    @settings(max_examples=200)
    @given(
        st.integers(0, 10**9),
        st.integers(1, 16),
        st.data(),
        st.integers(0, 64),
        st.integers(1, 64),
        st.fractions(0, 1, max_denominator=10**6),
        st.fractions(0, 1, max_denominator=10**9),
        st.fractions(0, 1, max_denominator=10**6),
        st.booleans(),
    )
    def test_matches_oracle(self, params, s, data, b, N, alpha, beta, gamma, ckpt):
        k = data.draw(st.integers(0, s))
        op = OperatorSpec("w", params, bytes_per_element=2)
        c = coeffs_for(alpha=alpha, beta=beta, gamma=gamma)
        got = operator_time(op, Decision(s, k), b, N, c, checkpoint=ckpt)
        assert got == oracle_time(op.weight_bytes, s, k, b, N, alpha, beta, gamma, ckpt)

    @given(st.integers(1, 10**9), st.integers(2, 256), st.fractions(0, 1), st.fractions(0, 1))
    def test_comm_ratio_is_one_and_a_half(self, params, N, alpha, beta):
        op = OperatorSpec("w", params)
        c = coeffs_for(alpha=alpha, beta=beta)
        dp = comm_time(op, Decision(1, 0), N, c)
        zdp = comm_time(op, Decision(1, 1), N, c)
        if dp:
            assert zdp / dp == F(3, 2)

    @given(st.integers(1, 10**8), st.integers(1, 8), st.integers(0, 32), st.integers(2, 16))
    def test_affine_in_k(self, params, s, b, N):
        op = OperatorSpec("w", params)
        c = coeffs_for()
        times = [operator_time(op, Decision(s, k), b, N, c) for k in range(s + 1)]
        slope = allgather_time(op.weight_bytes, N, c) / s
        assert all(t2 - t1 == slope for t1, t2 in zip(times, times[1:]))

    @given(st.integers(1, 10**8), st.integers(1, 8), st.integers(0, 32), st.booleans())
    def test_single_worker_ignores_k(self, params, s, b, ckpt):
        op = OperatorSpec("w", params)
        c = coeffs_for()
        expect = b * c.gamma("w") * (2 if ckpt else 1)
        for k in range(s + 1):
            assert operator_time(op, Decision(s, k), b, 1, c, checkpoint=ckpt) == expect

    @given(st.integers(1, 10**8), st.integers(1, 100), st.integers(1, 100))
    def test_batch_linearity(self, params, b1, b2):
        op = OperatorSpec("w", params, activation_bytes_per_sample=77)
        c = coeffs_for()
        d = Decision(2, 1)
        t0 = operator_time(op, d, 0, 8, c)
        assert (operator_time(op, d, b1, 8, c) - t0) * b2 == (operator_time(op, d, b2, 8, c) - t0) * b1
        dev = DeviceSpec(8, 1, 0, 0, 0)
        m1 = operator_memory(op, d, b1, 8, dev).persistent_bytes
        m2 = operator_memory(op, d, b2, 8, dev).persistent_bytes
        assert m2 - m1 == 77 * (b2 - b1)


class TestMemory:
    def test_examples(self):
        op = OperatorSpec("w", 1_000_000, bytes_per_element=4)
        assert model_state_bytes(op, Decision(1, 0), 4, 16) == 16_000_000
        assert model_state_bytes(op, Decision(1, 1), 4, 16) == 4_000_000
        assert model_state_bytes(op, Decision(4, 2), 4, 16) == 10_000_000
        dev = DeviceSpec(4, 1, 0, 0, 0)
        mem = operator_memory(op, Decision(4, 2), 0, 4, dev)
        assert mem.transient_surge_bytes == 1_000_000
        assert mem.persistent_bytes == 10_000_000

    def test_checkpoint_fraction(self):
        op = OperatorSpec("w", 10, activation_bytes_per_sample=1000)
        assert activation_bytes(op, 3) == 3000
        assert activation_bytes(op, 3, checkpoint=True) == pytest.approx(300)
        assert activation_bytes(op, 3, checkpoint=True, fraction=F(1, 4)) == 750

    @given(st.integers(1, 10**8), st.integers(1, 8), st.integers(2, 64), st.integers(0, 16))
    def test_monotone_tradeoff(self, params, s, N, b):
        op = OperatorSpec("w", params, activation_bytes_per_sample=5)
        dev = DeviceSpec(N, 1, 0, 0, 0)
        c = coeffs_for(alpha=F(1, 10**6))
        rows = [
            (operator_time(op, Decision(s, k), b, N, c), operator_memory(op, Decision(s, k), b, N, dev).persistent_bytes)
            for k in range(s + 1)
        ]
        for (t1, m1), (t2, m2) in zip(rows, rows[1:]):
            assert t2 > t1 and m2 < m1


class TestCostTable:
    def setup_method(self):
        self.model = ModelSpec("m", (OperatorSpec("a", 1000, hidden_size=8), OperatorSpec("b", 2000, splittable=False)))
        self.device = DeviceSpec(4, 10**9, 1e-5, 1e-9, 1e-12)
        self.coeffs = Coefficients(1e-5, 1e-9, {"a": 1e-3, "b": 2e-3})

    def test_entry_counts(self):
        t = build_cost_table(self.model, self.device, self.coeffs, 2, granularities={"a": 4})
        assert [len(t.entries["a"]), len(t.entries["b"])] == [5, 2]
        assert [d.k for d, _ in t.entries["a"]] == [0, 1, 2, 3, 4]

    def test_unsplittable_rejects_s(self):
        with pytest.raises(SpecValidationError):
            build_cost_table(self.model, self.device, self.coeffs, 1, granularities={"b": 2})

    def test_single_worker(self):
        dev = DeviceSpec(1, 10**9, 1e-5, 1e-9, 1e-12)
        t = build_cost_table(self.model, dev, self.coeffs, 2)
        for op_id in ("a", "b"):
            (_, dp), (_, zdp) = t.entries[op_id]
            assert dp.time_s == zdp.time_s
            assert dp.persistent_bytes == zdp.persistent_bytes

    def test_exact_entries_are_fractions(self):
        t = build_cost_table(self.model, self.device, self.coeffs, 2)
        assert all(isinstance(c.time_s, Fraction) for rows in t.entries.values() for _, c in rows)
        f = build_cost_table(self.model, self.device, self.coeffs, 2, exact=False)
        for op_id in ("a", "b"):
            for (_, ce), (_, cf) in zip(t.entries[op_id], f.entries[op_id]):
                assert float(ce.time_s) == pytest.approx(cf.time_s, rel=1e-12)

    def test_checkpoint_variant(self):
        plain = build_cost_table(self.model, self.device, self.coeffs, 2)
        ck = build_cost_table(self.model, self.device, self.coeffs, 2, options=CostOptions(checkpoint=True))
        (_, p0), (_, p1) = plain.entries["b"]
        (_, c0), (_, c1) = ck.entries["b"]
        G = allgather_time(8000, 4, Coefficients(F(1e-5), F(1e-9)))
        recompute = 2 * F(2e-3)
        assert c0.time_s - p0.time_s == recompute
        assert c1.time_s - p1.time_s == recompute + G


class TestCalibration:
    def test_recovers_generator(self):
        model = generate_family("IC", hidden=[64, 128, 96])
        truth = Coefficients(2e-5, 3e-10, {op.id: 1e-4 * (i + 1) for i, op in enumerate(model.operators)})
        got = fit_coefficients(synthesize_measurements(model, 8, truth), model, 8)
        assert got.alpha_s == pytest.approx(truth.alpha_s, rel=1e-9)
        assert got.beta_s_per_byte == pytest.approx(truth.beta_s_per_byte, rel=1e-9)
        for op_id, g in truth.gamma_per_op.items():
            assert got.gamma_per_op[op_id] == pytest.approx(g, rel=1e-9)

    def test_noisy_fit_is_close(self):
        model = generate_family("ND", 4, 256)
        truth = Coefficients.from_device(model, DeviceSpec(8, 1, 1e-5, 1e-10, 1e-13))
        got = fit_coefficients(synthesize_measurements(model, 8, truth, noise=0.01, seed=3), model, 8)
        assert got.beta_s_per_byte == pytest.approx(truth.beta_s_per_byte, rel=0.1)

    def test_two_identical_records(self):
        model = ModelSpec("m", (OperatorSpec("w", 1000),))
        rec = MeasurementRecord("w", Decision(1, 0), 1, 0.01)
        with pytest.raises(UnderdeterminedFit):
            fit_coefficients([rec, rec], model, 4)

    def test_one_size_needs_a_pin(self):
        model = ModelSpec("m", (OperatorSpec("w", 1000),))
        recs = [MeasurementRecord("w", Decision(4, k), 2, 0.01 + 0.001 * k) for k in range(5)]
        with pytest.raises(UnderdeterminedFit) as err:
            fit_coefficients(recs, model, 8)
        assert any("alpha_s and beta_s_per_byte" in m for m in err.value.missing)
        got = fit_coefficients(recs, model, 8, pinned={"alpha_s": 0.0})
        assert got.alpha_s == 0.0

    def test_unknown_operator_and_bad_pin(self):
        model = ModelSpec("m", (OperatorSpec("w", 1000),))
        with pytest.raises(SpecValidationError):
            fit_coefficients([MeasurementRecord("x", Decision(1, 0), 1, 0.1)], model, 4)
        with pytest.raises(SpecValidationError):
            fit_coefficients([MeasurementRecord("w", Decision(1, 0), 1, 0.1)], model, 4, pinned={"gamma": 1.0})

    def test_single_worker_is_underdetermined(self):
        model = ModelSpec("m", (OperatorSpec("w", 1000), OperatorSpec("v", 3000)))
        truth = Coefficients(1e-5, 1e-9, {"w": 1e-3, "v": 1e-3})
        with pytest.raises(UnderdeterminedFit):
            fit_coefficients(synthesize_measurements(model, 1, truth), model, 1)


class TestFiles:
    def test_measurement_roundtrip(self):
        model = generate_family("ND", 1, 32)
        recs = synthesize_measurements(model, 4, Coefficients.from_device(model, DeviceSpec(4, 1, 1e-5, 1e-9, 1e-12)))
        assert parse_measurements(dump_measurements(recs)) == recs

    def test_measurement_validation(self):
        bad = [{"operator_id": "w", "s": 2, "k": 3, "batch_size": 1, "measured_time_s": 0.1}]
        with pytest.raises(SpecValidationError):
            parse_measurements(json.dumps(bad))
        bad = [{"operator_id": "w", "s": 1, "k": 0, "batch_size": 1, "measured_time_s": 0}]
        with pytest.raises(SpecValidationError):
            parse_measurements(json.dumps(bad))
        with pytest.raises(SpecParseError):
            parse_measurements("{")

    def test_coefficients_roundtrip(self):
        c = Coefficients(1e-5, 2e-10, {"a": 0.5, "b": 0.25})
        assert parse_coefficients(dump_coefficients(c)) == c
        with pytest.raises(SpecValidationError):
            parse_coefficients(json.dumps({"alpha_s": -1, "beta_s_per_byte": 0, "gamma_per_op": {}}))


def test_fit_is_ordinary_least_squares():
    # one operator, one batch size, alpha pinned: the model is a straight line in k
    rng = random.Random(4)
    model = ModelSpec("m", (OperatorSpec("w", 4096),))
    ks = list(range(5))
    ys = [0.03 + 0.003 * k + rng.uniform(-1e-4, 1e-4) for k in ks]
    recs = [MeasurementRecord("w", Decision(4, k), 3, y) for k, y in zip(ks, ys)]
    c = fit_coefficients(recs, model, 8, pinned={"alpha_s": 0.0})
    pred = [operator_time(model.operators[0], Decision(4, k), 3, 8, c) for k in ks]
    ref = np.polyval(np.polyfit(ks, ys, 1), ks)
    assert np.allclose(pred, ref, rtol=1e-10)


def test_fit_falls_back_to_nonnegative():
    # slope too steep for the intercept: the line through the data would need gamma < 0,
    # so gamma is held at 0 and G is the 1-D least-squares scale of x_k = 2 + k/4
    model = ModelSpec("m", (OperatorSpec("w", 4096),))
    ks = list(range(5))
    ys = [0.02 + 0.003 * k for k in ks]
    recs = [MeasurementRecord("w", Decision(4, k), 3, y) for k, y in zip(ks, ys)]
    c = fit_coefficients(recs, model, 8, pinned={"alpha_s": 0.0})
    xs = [2 + k / 4 for k in ks]
    G = sum(x * y for x, y in zip(xs, ys)) / sum(x * x for x in xs)
    assert c.gamma_per_op["w"] == 0.0
    assert allgather_time(4096 * 4, 8, c) == pytest.approx(G, rel=1e-9)
