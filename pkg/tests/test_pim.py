"""Scheme forward/backward tests against the exact-rational oracle."""
import math
from fractions import Fraction

import numpy as np
import pytest

from pimtrain import oracle
from pimtrain.pim import (
    MacGroupResult,
    NonIdealModel,
    PimConfig,
    gste_backward,
    mac_bit_serial,
    mac_differential,
    mac_native,
    pim_linear,
)
from pimtrain.nonideal import NoiseModel, TransferCurve, CurveBank
from pimtrain.quant import (
    QTensor,
    decompose_activation,
    decompose_weight_bits,
    quantize_activation,
)


def wq(codes, b_w):
    codes = np.asarray(codes, dtype=np.int64)
    lv = 2 ** (b_w - 1) - 1
    return QTensor(codes / lv, b_w, "unit_signed", codes)


def aq(codes, b_a):
    codes = np.asarray(codes, dtype=np.int64)
    return QTensor(codes / (2 ** b_a - 1), b_a, "unit", codes)


def cfg_for(scheme, n, b_imc, b_w, b_a, m, **kw):
    return PimConfig(scheme=scheme, n_group=n, b_imc=b_imc, dac_bits=m,
                     b_w=b_w, b_a=b_a, **kw)


def random_instance(rng):
    b_w = int(rng.integers(2, 5))
    b_a = int(rng.integers(1, 5))
    m = int(rng.choice([d for d in (1, 2, 4) if b_a % d == 0]))
    b_imc = int(rng.integers(1, 9))
    n = int(rng.integers(1, 17))
    lv = 2 ** (b_w - 1) - 1
    wcodes = rng.integers(-lv, lv + 1, n)
    acodes = rng.integers(0, 2 ** b_a, n)
    return wcodes, acodes, b_w, b_a, m, b_imc


class TestMacNative:
    def test_unit_case(self):
        cfg = cfg_for("native", 1, 1, 2, 1, 1)
        res = mac_native(wq([1], 2), decompose_activation(aq([1], 1), 1), cfg)
        assert res.value_pim == 1.0

    def test_worked_example(self):
        # N=2, b_a=2, m=1, b_imc=2, weights [1,-1], act codes [1,2] -> -4/9
        cfg = cfg_for("native", 2, 2, 2, 2, 1)
        res = mac_native(wq([1, -1], 2), decompose_activation(aq([1, 2], 2), 1), cfg)
        assert res.value_pim == float(Fraction(-4, 9))
        assert np.array_equal(res.adc_codes, [2, -2])

    def test_infinite_resolution(self):
        rng = np.random.default_rng(0)
        cfg = cfg_for("native", 8, math.inf, 4, 4, 1)
        w = wq(rng.integers(-7, 8, 8), 4)
        a = aq(rng.integers(0, 16, 8), 4)
        res = mac_native(w, decompose_activation(a, 1), cfg)
        assert res.value_pim == res.value_exact

    def test_group_length_mismatch(self):
        cfg = cfg_for("native", 4, 4, 4, 4, 1)
        with pytest.raises(ValueError, match="group length"):
            mac_native(wq([1, 2], 4), decompose_activation(aq([1, 2], 4), 1), cfg)

    def test_oracle_equivalence_randomized(self):
        rng = np.random.default_rng(2024)
        for _ in range(300):
            wcodes, acodes, b_w, b_a, m, b_imc = random_instance(rng)
            cfg = cfg_for("native", len(wcodes), b_imc, b_w, b_a, m)
            res = mac_native(wq(wcodes, b_w),
                             decompose_activation(aq(acodes, b_a), m), cfg)
            want, codes = oracle.mac_native_exact(
                list(wcodes), list(acodes), b_w, b_a, m, b_imc,
                return_codes=True)
            assert res.value_pim == float(want)
            assert list(res.adc_codes) == codes


class TestMacDifferential:
    def test_nonnegative_weights_match_native(self):
        rng = np.random.default_rng(5)
        w = wq(rng.integers(0, 8, 8), 4)
        a = aq(rng.integers(0, 16, 8), 4)
        planes = decompose_activation(a, 1)
        r_nat = mac_native(w, planes, cfg_for("native", 8, 5, 4, 4, 1))
        r_dif = mac_differential(w, planes, cfg_for("differential", 8, 5, 4, 4, 1))
        assert r_dif.value_pim == r_nat.value_pim

    def test_antisymmetry(self):
        rng = np.random.default_rng(6)
        codes = rng.integers(-7, 8, 8)
        a = aq(rng.integers(0, 16, 8), 4)
        planes = decompose_activation(a, 1)
        cfg = cfg_for("differential", 8, 4, 4, 4, 1)
        r1 = mac_differential(wq(codes, 4), planes, cfg)
        r2 = mac_differential(wq(-codes, 4), planes, cfg)
        assert r1.value_pim == -r2.value_pim

    def test_oracle_equivalence_randomized(self):
        rng = np.random.default_rng(77)
        for _ in range(300):
            wcodes, acodes, b_w, b_a, m, b_imc = random_instance(rng)
            cfg = cfg_for("differential", len(wcodes), b_imc, b_w, b_a, m)
            res = mac_differential(
                wq(wcodes, b_w), decompose_activation(aq(acodes, b_a), m), cfg)
            want, codes = oracle.mac_differential_exact(
                list(wcodes), list(acodes), b_w, b_a, m, b_imc,
                return_codes=True)
            assert res.value_pim == float(want)
            assert list(res.adc_codes) == codes
            assert all(c >= 0 for c in res.adc_codes)


class TestMacBitSerial:
    def test_unit_case(self):
        cfg = cfg_for("bit_serial", 1, 1, 2, 1, 1)
        bits = decompose_weight_bits(wq([1], 2), 2)
        res = mac_bit_serial(bits, decompose_activation(aq([1], 1), 1), cfg)
        assert res.value_pim == 1.0

    def test_all_weight_bits_zero(self):
        cfg = cfg_for("bit_serial", 4, 3, 4, 4, 1)
        bits = decompose_weight_bits(wq([0, 0, 0, 0], 4), 4)
        planes = decompose_activation(aq([3, 9, 15, 1], 4), 1)
        res = mac_bit_serial(bits, planes, cfg)
        assert res.value_pim == 0.0

    def test_oracle_equivalence_randomized(self):
        rng = np.random.default_rng(99)
        for _ in range(300):
            wcodes, acodes, b_w, b_a, m, b_imc = random_instance(rng)
            cfg = cfg_for("bit_serial", len(wcodes), b_imc, b_w, b_a, m)
            bits = decompose_weight_bits(wq(wcodes, b_w), b_w)
            res = mac_bit_serial(
                bits, decompose_activation(aq(acodes, b_a), m), cfg)
            want, codes = oracle.mac_bit_serial_exact(
                list(wcodes), list(acodes), b_w, b_a, m, b_imc,
                return_codes=True)
            assert res.value_pim == float(want)
            assert list(res.adc_codes) == codes

    def test_large_group_oracle(self):
        rng = np.random.default_rng(144)
        n, b_w, b_a, m, b_imc = 144, 4, 4, 1, 7
        wcodes = rng.integers(-7, 8, n)
        acodes = rng.integers(0, 16, n)
        cfg = cfg_for("bit_serial", n, b_imc, b_w, b_a, m)
        bits = decompose_weight_bits(wq(wcodes, b_w), b_w)
        res = mac_bit_serial(bits, decompose_activation(aq(acodes, b_a), m), cfg)
        want = oracle.mac_bit_serial_exact(
            list(wcodes), list(acodes), b_w, b_a, m, b_imc)
        assert res.value_pim == float(want)


class TestSchemeEquivalenceAtInfinity:
    @pytest.mark.parametrize("scheme", ["native", "differential", "bit_serial"])
    def test_matches_exact_dot(self, scheme):
        rng = np.random.default_rng(31)
        for _ in range(200):
            n = int(rng.integers(1, 33))
            wcodes = rng.integers(-7, 8, (4, n))
            acodes = rng.integers(0, 16, (3, n))
            cfg = cfg_for(scheme, n, math.inf, 4, 4, 1)
            res = pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg)
            ref = (acodes / 15.0) @ (wcodes / 7.0).T
            assert np.allclose(res.value_pim, ref, rtol=1e-9, atol=1e-12)
            assert np.array_equal(res.value_pim, res.value_exact)


class TestPimLinear:
    def test_single_group_matches_mac(self):
        rng = np.random.default_rng(8)
        n = 9
        wcodes = rng.integers(-7, 8, (1, n))
        acodes = rng.integers(0, 16, (1, n))
        cfg = cfg_for("native", n, 5, 4, 4, 1)
        res = pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg)
        single = mac_native(wq(wcodes[0], 4),
                            decompose_activation(aq(acodes[0], 4), 1), cfg)
        assert res.value_pim[0, 0] == single.value_pim

    def test_zero_activations(self):
        cfg = cfg_for("bit_serial", 8, 4, 4, 4, 1)
        res = pim_linear(wq(np.full((3, 16), 5), 4),
                         aq(np.zeros((2, 16), dtype=int), 4), cfg)
        assert np.all(res.value_pim == 0.0)

    def test_group_sum_vs_oracle(self):
        # two groups accumulate digitally: value equals sum of group oracles
        rng = np.random.default_rng(12)
        n = 8
        wcodes = rng.integers(-7, 8, (2, 2 * n))
        acodes = rng.integers(0, 16, (3, 2 * n))
        cfg = cfg_for("bit_serial", n, 4, 4, 4, 2)
        res = pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg)
        for r in range(3):
            for o in range(2):
                want = sum(
                    oracle.mac_bit_serial_exact(
                        list(wcodes[o, g * n:(g + 1) * n]),
                        list(acodes[r, g * n:(g + 1) * n]), 4, 4, 2, 4)
                    for g in (0, 1))
                assert res.value_pim[r, o] == float(want)

    def test_incompatible_shapes_rejected(self):
        cfg = cfg_for("native", 8, 5, 4, 4, 1)
        with pytest.raises(ValueError, match="multiple"):
            pim_linear(wq(np.zeros((2, 12), dtype=int), 4),
                       aq(np.zeros((2, 12), dtype=int), 4), cfg)

    def test_code_range_safety_under_noise(self):
        rng = np.random.default_rng(3)
        n, b_imc = 16, 3
        cfg = cfg_for("bit_serial", n, b_imc, 4, 4, 1,
                      nonideal=NonIdealModel(noise=NoiseModel(5.0, seed=1)))
        wcodes = rng.integers(-7, 8, (4, n))
        acodes = rng.integers(0, 16, (8, n))
        res = pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg,
                         rng=np.random.default_rng(0), capture_codes=True)
        assert res.adc_codes.min() >= 0
        assert res.adc_codes.max() <= 2 ** b_imc - 1

    def test_signed_code_range_native_noise(self):
        rng = np.random.default_rng(4)
        n, b_imc = 8, 2
        cfg = cfg_for("native", n, b_imc, 4, 4, 1,
                      nonideal=NonIdealModel(noise=NoiseModel(10.0, seed=2)))
        wcodes = rng.integers(-7, 8, (4, n))
        acodes = rng.integers(0, 16, (16, n))
        res = pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg,
                         rng=np.random.default_rng(1), capture_codes=True)
        assert res.adc_codes.min() >= -(2 ** b_imc - 1)
        assert res.adc_codes.max() <= 2 ** b_imc - 1

    def test_identity_interface_reduces_to_ideal(self):
        # identity curve + zero noise must be bit-identical to the no-interface path
        rng = np.random.default_rng(9)
        n = 16
        ident = CurveBank(
            tuple([TransferCurve(5, np.arange(32, dtype=float))] * 4), 5)
        cfg0 = cfg_for("bit_serial", n, 5, 4, 4, 1)
        cfg1 = cfg0.with_nonideal(NonIdealModel(curves=ident,
                                                noise=NoiseModel(0.0)))
        wcodes = rng.integers(-7, 8, (6, n))
        acodes = rng.integers(0, 16, (10, n))
        r0 = pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg0)
        r1 = pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg1)
        assert np.array_equal(r0.value_pim, r1.value_pim)


class TestGsteBackward:
    def _forward(self, scheme, rng, b_imc=4):
        n = 12
        wcodes = rng.integers(-7, 8, (5, n))
        acodes = rng.integers(0, 16, (7, n))
        cfg = cfg_for(scheme, n, b_imc, 4, 4, 1)
        return pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg)

    def test_xi_one_equals_plain_backward(self):
        rng = np.random.default_rng(21)
        res = self._forward("native", rng)
        g = rng.standard_normal(res.value_pim.shape)
        gQ, gq = gste_backward(g, res, 1.0)
        assert np.array_equal(gQ, g.T @ res.acts)
        assert np.array_equal(gq, g @ res.weights)

    def test_zero_grad(self):
        rng = np.random.default_rng(22)
        res = self._forward("bit_serial", rng)
        gQ, gq = gste_backward(np.zeros(res.value_pim.shape), res, 2.0)
        assert np.all(gQ == 0) and np.all(gq == 0)

    @pytest.mark.parametrize("xi", [1.0, 2.5, 0.3])
    def test_scaled_backward_bit_exact(self, xi):
        rng = np.random.default_rng(23)
        res = self._forward("differential", rng)
        g = rng.standard_normal(res.value_pim.shape)
        gQ, gq = gste_backward(g, res, xi)
        assert np.array_equal(gQ, xi * (g.T @ res.acts))
        assert np.array_equal(gq, xi * (g @ res.weights))

    def test_backward_independent_of_scheme(self):
        rng = np.random.default_rng(24)
        n = 12
        wcodes = rng.integers(-7, 8, (5, n))
        acodes = rng.integers(0, 16, (7, n))
        g = rng.standard_normal((7, 5))
        grads = []
        for scheme in ("native", "differential", "bit_serial"):
            cfg = cfg_for(scheme, n, 3, 4, 4, 1)
            res = pim_linear(wq(wcodes, 4), aq(acodes, 4), cfg)
            grads.append(gste_backward(g, res, 1.7))
        for gQ, gq in grads[1:]:
            assert np.array_equal(gQ, grads[0][0])
            assert np.array_equal(gq, grads[0][1])
