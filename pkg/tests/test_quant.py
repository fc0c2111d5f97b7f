"""Quantizer and bit-plane decomposition tests."""
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pimtrain.quant import (
    BitPlanes,
    QTensor,
    activation_ste_mask,
    decompose_activation,
    decompose_weight_bits,
    quantize_activation,
    quantize_weight,
    round_half_away,
    split_signed,
)


def test_round_half_away_ties():
    x = np.array([0.5, 1.5, -0.5, -1.5, 2.5, -2.5])
    assert np.array_equal(round_half_away(x), [1, 2, -1, -2, 3, -3])


class TestQuantizeActivation:
    def test_endpoints_fixed_points(self):
        q = quantize_activation([0.0, 1.0], 4)
        assert np.array_equal(q.data, [0.0, 1.0])
        assert np.array_equal(q.codes, [0, 15])

    def test_tie_rounds_away_from_zero(self):
        q = quantize_activation([0.5], 1)
        assert q.data[0] == 1.0

    def test_exact_rational_oracle(self):
        # round(7 * 0.30) = 2 computed on the exact rational
        q = quantize_activation([0.30], 3)
        assert q.codes[0] == 2
        assert q.data[0] == pytest.approx(2 / 7, abs=0)

    def test_clips_outside_unit(self):
        q = quantize_activation([-3.0, 2.0], 4)
        assert np.array_equal(q.data, [0.0, 1.0])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            quantize_activation([0.1, np.nan], 4)
        with pytest.raises(ValueError):
            quantize_activation([np.inf], 4)

    @pytest.mark.parametrize("b", range(1, 11))
    def test_code_round_trip(self, b):
        codes = np.arange(2 ** b)
        x = codes / (2 ** b - 1)
        q = quantize_activation(x, b)
        assert np.array_equal(q.codes, codes)
        assert np.array_equal(q.data, x)

    @given(st.lists(st.floats(-0.5, 1.5), min_size=2, max_size=64),
           st.integers(1, 8))
    @settings(max_examples=200, deadline=None)
    def test_monotone(self, xs, b):
        xs = sorted(xs)
        q = quantize_activation(xs, b)
        assert np.all(np.diff(q.data) >= 0)

    def test_ste_mask(self):
        x = np.array([-1e-9, 0.0, 0.3, 1.0, 1.0 + 1e-9])
        assert np.array_equal(activation_ste_mask(x), [0, 1, 1, 1, 0])


class TestQuantizeWeight:
    def test_extremum_maps_to_one(self):
        W = np.array([0.1, -0.7, 0.3])
        q, _ = quantize_weight(W, 4, 8)
        assert q.data[1] == -1.0

    def test_symmetric_pair(self):
        q, s = quantize_weight(np.array([-0.4, 0.4]), 4, 9)
        assert np.array_equal(q.data, [-1.0, 1.0])
        assert s == pytest.approx(1 / 3, abs=1e-15)  # 1/sqrt(9)

    def test_seeded_random_vs_direct_formula(self):
        rng = np.random.default_rng(1234)
        W = rng.normal(0, 0.2, (16, 9))
        b_w, n_out = 4, 8
        q, s = quantize_weight(W, b_w, n_out)
        lv = 2 ** (b_w - 1) - 1
        t = np.tanh(W)
        ref_codes = np.sign(t) * np.floor(np.abs(t) / np.abs(t).max() * lv + 0.5)
        assert np.array_equal(q.codes, ref_codes)
        ref_var = np.var(ref_codes / lv)
        assert s == pytest.approx(1 / math.sqrt(n_out * ref_var), rel=1e-15)

    def test_all_zero_degenerate(self):
        q, s = quantize_weight(np.zeros(5), 4, 8)
        assert np.all(q.data == 0)
        assert s == 1.0

    def test_zero_variance_floor(self):
        # equal nonzero weights quantize to identical codes; variance floor
        q, s = quantize_weight(np.array([2.0, 2.0]), 4, 4)
        assert np.all(q.data == 1.0)
        lv = 7
        assert s == pytest.approx(1 / math.sqrt(4 * (1 / lv ** 2)), rel=1e-15)

    def test_rejects_tiny_bits(self):
        with pytest.raises(ValueError):
            quantize_weight(np.array([1.0, -1.0]), 1, 4)


class TestDecomposeActivation:
    def test_zero_code(self):
        q = quantize_activation(np.zeros(3), 4)
        planes = decompose_activation(q, 2)
        for p in planes.planes:
            assert np.all(p == 0)

    def test_binary_digits(self):
        q = QTensor(np.array([2 / 3]), 2, "unit", np.array([2]))
        planes = decompose_activation(q, 1)
        assert [int(p[0]) for p in planes.planes] == [0, 1]

    def test_base4_digits(self):
        # 11 = 3 + 2*4
        q = QTensor(np.array([11 / 15]), 4, "unit", np.array([11]))
        planes = decompose_activation(q, 2)
        assert [int(p[0]) for p in planes.planes] == [3, 2]
        assert planes.plane_weights == [1, 4]

    def test_rejects_non_dividing_m(self):
        q = quantize_activation([0.5], 4)
        with pytest.raises(ValueError, match="divide"):
            decompose_activation(q, 3)

    @pytest.mark.parametrize("b_a,m", [(2, 1), (4, 1), (4, 2), (4, 4),
                                       (6, 1), (6, 2), (6, 3)])
    def test_reconstruction_exact_exhaustive(self, b_a, m):
        codes = np.arange(2 ** b_a)
        q = QTensor(codes / (2 ** b_a - 1), b_a, "unit", codes)
        planes = decompose_activation(q, m)
        recon = [
            sum(Fraction(int(w)) * int(p[i])
                for p, w in zip(planes.planes, planes.plane_weights))
            * Fraction(1, 2 ** b_a - 1)
            for i in range(codes.size)
        ]
        assert recon == [Fraction(int(c), 2 ** b_a - 1) for c in codes]

    @pytest.mark.parametrize("b_a,m", [(8, 4), (10, 5), (10, 2)])
    def test_reconstruction_exact_random(self, b_a, m):
        rng = np.random.default_rng(7)
        codes = rng.integers(0, 2 ** b_a, 256)
        q = QTensor(codes / (2 ** b_a - 1), b_a, "unit", codes)
        planes = decompose_activation(q, m)
        acc = np.zeros(codes.shape, dtype=np.int64)
        for p, w in zip(planes.planes, planes.plane_weights):
            acc += p.astype(np.int64) * int(w)
        assert np.array_equal(acc, codes)


class TestDecomposeWeightBits:
    def _qt(self, codes, b_w):
        lv = 2 ** (b_w - 1) - 1
        codes = np.asarray(codes)
        return QTensor(codes / lv, b_w, "unit_signed", codes)

    def test_zero(self):
        planes = decompose_weight_bits(self._qt([0], 4), 4)
        assert all(int(p[0]) == 0 for p in planes.planes)

    def test_two_bit_plus_one(self):
        planes = decompose_weight_bits(self._qt([1], 2), 2)
        assert [int(p[0]) for p in planes.planes] == [1, 0]
        assert planes.plane_weights == [1, -2]

    def test_minus_seven(self):
        # -7 = 1 + 0*2 + 0*4 - 8
        planes = decompose_weight_bits(self._qt([-7], 4), 4)
        assert [int(p[0]) for p in planes.planes] == [1, 0, 0, 1]

    @pytest.mark.parametrize("b_w", range(2, 7))
    def test_signed_reconstruction_exhaustive(self, b_w):
        lv = 2 ** (b_w - 1) - 1
        codes = np.arange(-lv, lv + 1)
        planes = decompose_weight_bits(self._qt(codes, b_w), b_w)
        acc = np.zeros(codes.shape, dtype=np.int64)
        for p, w in zip(planes.planes, planes.plane_weights):
            acc += p.astype(np.int64) * int(w)
        assert np.array_equal(acc, codes)

    @pytest.mark.parametrize("b_w", [8, 10])
    def test_signed_reconstruction_random(self, b_w):
        lv = 2 ** (b_w - 1) - 1
        rng = np.random.default_rng(3)
        codes = rng.integers(-lv, lv + 1, 512)
        planes = decompose_weight_bits(self._qt(codes, b_w), b_w)
        acc = np.zeros(codes.shape, dtype=np.int64)
        for p, w in zip(planes.planes, planes.plane_weights):
            acc += p.astype(np.int64) * int(w)
        assert np.array_equal(acc, codes)

    def test_rejects_missing_codes(self):
        q = QTensor(np.array([0.5]), 4, "unit_signed", None)
        with pytest.raises(ValueError, match="codes"):
            decompose_weight_bits(q, 4)


class TestSplitSigned:
    def _qt(self, codes, b_w=4):
        lv = 2 ** (b_w - 1) - 1
        codes = np.asarray(codes)
        return QTensor(codes / lv, b_w, "unit_signed", codes)

    def test_example(self):
        p, n = split_signed(self._qt([7, -7]))
        assert np.array_equal(p.data, [1.0, 0.0])
        assert np.array_equal(n.data, [0.0, -1.0])

    def test_zero(self):
        p, n = split_signed(self._qt([0]))
        assert p.data[0] == 0 and n.data[0] == 0

    def test_parts_sum_bit_exact(self):
        rng = np.random.default_rng(11)
        codes = rng.integers(-7, 8, 1000)
        q = self._qt(codes)
        p, n = split_signed(q)
        assert np.array_equal(p.data + n.data, q.data)
        assert np.array_equal(p.codes + n.codes, q.codes)
