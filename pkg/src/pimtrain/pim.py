"""Forward evaluation of the three MAC decomposition schemes.

An analog MAC group accumulates n_group products and digitizes the result
with a b_imc-bit converter; per-scheme plane decompositions and the exact
digital recombination are implemented by the kernel backends. The backward
contract is scheme-independent: the digitized group output differentiates
as xi times the plain bilinear form, so gradients are ordinary matmuls
scaled by xi (gste_backward).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _kernels
from .quant import (
    KIND_ACT_SLICES,
    KIND_WEIGHT_BITS,
    RANGE_UNIT,
    RANGE_UNIT_SIGNED,
    BitPlanes,
    QTensor,
)

SCHEMES = ("native", "differential", "bit_serial")

# Forward rescale constants keyed on (scheme, b_imc); resolutions outside
# the table use 1.0. Overridable per run config.
FORWARD_SCALE_TABLE = {
    "native": {3: 100.0, 4: 20.0, 5: 1.0, 6: 1.0, 7: 1.0},
    "differential": {3: 1000.0, 4: 1000.0, 5: 1000.0, 6: 1000.0, 7: 1000.0},
    "bit_serial": {3: 100.0, 4: 30.0, 5: 30.0, 6: 30.0, 7: 1.03},
}


def default_forward_scale(scheme: str, b_imc) -> float:
    if not math.isfinite(b_imc):
        return 1.0
    return FORWARD_SCALE_TABLE.get(scheme, {}).get(int(b_imc), 1.0)


@dataclass(frozen=True)
class NonIdealModel:
    """Analog interface imperfections attached to a PimConfig.

    curves/curve file loading and the noise model live in the nonideal
    module; this is just the reference the MAC path consumes.
    """

    curves: Optional[object] = None      # CurveBank
    noise: Optional[object] = None       # NoiseModel


@dataclass(frozen=True)
class PimConfig:
    """One analog MAC execution context."""

    scheme: str
    n_group: int
    b_imc: float            # int, or math.inf
    dac_bits: int
    b_w: int
    b_a: int
    unit_in_channels: int = 0   # 0: derive from n_group / kernel area
    unit_out_channels: int = 8
    forward_scale: float = 1.0
    nonideal: Optional[NonIdealModel] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.n_group < 1:
            raise ValueError("n_group must be positive")
        if self.b_a % self.dac_bits != 0:
            raise ValueError(
                f"dac_bits={self.dac_bits} must divide b_a={self.b_a}")
        if self.forward_scale <= 0:
            raise ValueError("forward_scale must be positive")

    @property
    def finite(self) -> bool:
        return math.isfinite(self.b_imc)

    def with_b_imc(self, b_imc) -> "PimConfig":
        return replace(self, b_imc=b_imc)

    def with_nonideal(self, nonideal) -> "PimConfig":
        return replace(self, nonideal=nonideal)


@dataclass
class MacGroupResult:
    """Recombined MAC outputs with the exact dot product alongside."""

    value_pim: np.ndarray
    value_exact: Optional[np.ndarray]
    adc_codes: Optional[np.ndarray]
    # operands kept for the backward pass
    weights: Optional[np.ndarray] = None
    acts: Optional[np.ndarray] = None


def _curve_arrays(cfg: PimConfig, n_out: int):
    """Measured-level matrix and per-output curve assignment, or (None, None)."""
    ni = cfg.nonideal
    if ni is None or ni.curves is None:
        return None, None
    bank = ni.curves
    table = bank.as_matrix()
    idx = bank.assign(n_out, cfg.unit_out_channels)
    return table, idx


def _noise_array(cfg: PimConfig, rows: int, n_out: int, groups: int,
                 rng) -> Optional[np.ndarray]:
    """Pre-drawn converter noise, consumed in (row, out, conversion) order."""
    ni = cfg.nonideal
    if ni is None or ni.noise is None or ni.noise.sigma_lsb == 0.0:
        return None
    if rng is None:
        raise ValueError("noise model present but no rng stream supplied")
    per_group = _kernels.conversions_per_group(
        _kernels.scheme_id(cfg.scheme), cfg.b_w, cfg.b_a, cfg.dac_bits
    )
    eps = rng.standard_normal((rows, n_out, groups * per_group))
    return eps * ni.noise.sigma_lsb


def _exact_value(wcodes, acodes, b_w, b_a):
    """Exact dequantized dot product via integer sums and one division."""
    dot = acodes.astype(np.float64) @ wcodes.astype(np.float64).T
    return dot / ((2 ** (b_w - 1) - 1) * (2 ** b_a - 1))


def pim_linear(Q: QTensor, q: QTensor, cfg: PimConfig, *, rng=None,
               compute_exact: bool = True, capture_codes: bool = False,
               n_threads: int = 0) -> MacGroupResult:
    """Batched layer-level MAC evaluation.

    Q: quantized weights (n_out, n_in) with codes; q: quantized activations
    (rows, n_in) with codes. The input axis is split into groups of
    cfg.n_group (callers pad to a multiple); group partial sums accumulate
    digitally at full precision. Converter instances are assigned to output
    columns in blocks of unit_out_channels, round-robin over the bank.
    """
    if Q.codes is None or q.codes is None:
        raise ValueError("pim_linear needs quantized operands with codes")
    wcodes = Q.codes
    acodes = q.codes
    if acodes.ndim != 2 or wcodes.ndim != 2:
        raise ValueError("expected 2-d operands (rows,n_in) and (n_out,n_in)")
    rows, n_in = acodes.shape
    n_out = wcodes.shape[0]
    if wcodes.shape[1] != n_in:
        raise ValueError(
            f"shape mismatch: weights {wcodes.shape}, acts {acodes.shape}")
    if n_in % cfg.n_group != 0:
        raise ValueError(
            f"input width {n_in} not a multiple of group size {cfg.n_group}")

    exact = _exact_value(wcodes, acodes, cfg.b_w, cfg.b_a) if (
        compute_exact or not cfg.finite) else None

    if not cfg.finite:
        value = exact if compute_exact else _exact_value(
            wcodes, acodes, cfg.b_w, cfg.b_a)
        return MacGroupResult(value, exact, None, Q.data, q.data)

    curves, curve_idx = _curve_arrays(cfg, n_out)
    noise = _noise_array(cfg, rows, n_out, n_in // cfg.n_group, rng)
    value, codes = _kernels.mac_layer(
        _kernels.scheme_id(cfg.scheme), acodes, wcodes,
        cfg.n_group, int(cfg.b_imc), cfg.b_w, cfg.b_a, cfg.dac_bits,
        curves=curves, curve_idx=curve_idx, noise=noise,
        capture_codes=capture_codes, n_threads=n_threads,
    )
    return MacGroupResult(value, exact, codes, Q.data, q.data)


def _single_group(Q: QTensor, planes: BitPlanes, cfg: PimConfig, scheme: str,
                  rng=None) -> MacGroupResult:
    if cfg.scheme != scheme:
        raise ValueError(f"config scheme {cfg.scheme!r}, expected {scheme!r}")
    if Q.codes is None:
        raise ValueError("weight tensor carries no codes")
    wcodes = np.atleast_1d(Q.codes)
    if wcodes.ndim != 1 or wcodes.shape[0] != cfg.n_group:
        raise ValueError(
            f"group length {wcodes.shape} does not match n_group={cfg.n_group}")
    # reassemble activation codes from the supplied planes
    if len(planes.planes) != cfg.b_a // cfg.dac_bits:
        raise ValueError("plane count does not match b_a / dac_bits")
    acodes = np.zeros(cfg.n_group, dtype=np.int64)
    for p, w in zip(planes.planes, planes.plane_weights):
        acodes += np.asarray(p, dtype=np.int64) * int(w)
    res = pim_linear(
        QTensor(Q.data.reshape(1, -1), Q.bits, Q.range,
                wcodes.reshape(1, -1)),
        QTensor(acodes.astype(np.float64).reshape(1, -1) / (2 ** cfg.b_a - 1),
                cfg.b_a, RANGE_UNIT, acodes.reshape(1, -1)),
        cfg, rng=rng, capture_codes=True,
    )
    codes = None if res.adc_codes is None else res.adc_codes[0, 0]
    return MacGroupResult(res.value_pim[0, 0], res.value_exact[0, 0], codes,
                          Q.data, planes)


def mac_native(Q: QTensor, q_planes: BitPlanes, cfg: PimConfig,
               rng=None) -> MacGroupResult:
    """One signed MAC group: weights applied directly per activation plane."""
    if q_planes.kind != KIND_ACT_SLICES:
        raise ValueError("activation planes expected")
    return _single_group(Q, q_planes, cfg, "native", rng)


def mac_differential(Q: QTensor, q_planes: BitPlanes, cfg: PimConfig,
                     rng=None) -> MacGroupResult:
    """One MAC group with separate unsigned conversions per weight sign."""
    if q_planes.kind != KIND_ACT_SLICES:
        raise ValueError("activation planes expected")
    return _single_group(Q, q_planes, cfg, "differential", rng)


def mac_bit_serial(Q_bits: BitPlanes, q_planes: BitPlanes, cfg: PimConfig,
                   rng=None) -> MacGroupResult:
    """One MAC group evaluated per (weight bit, activation plane) pair."""
    if Q_bits.kind != KIND_WEIGHT_BITS:
        raise ValueError("weight bit planes expected")
    if q_planes.kind != KIND_ACT_SLICES:
        raise ValueError("activation planes expected")
    lv = 2 ** (cfg.b_w - 1) - 1
    codes = np.zeros(np.asarray(Q_bits.planes[0]).shape, dtype=np.int64)
    for p, w in zip(Q_bits.planes, Q_bits.plane_weights):
        codes += np.asarray(p, dtype=np.int64) * int(w)
    Q = QTensor(codes.astype(np.float64) / lv, cfg.b_w, RANGE_UNIT_SIGNED, codes)
    return _single_group(Q, q_planes, cfg, "bit_serial", rng)


def gste_backward(grad_out: np.ndarray, saved: MacGroupResult,
                  xi: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward of any scheme: xi times the plain bilinear backward.

    grad_out: (rows, n_out). Returns (grad_Q (n_out, n_in), grad_q
    (rows, n_in)) computed against the operands recorded in the forward.
    """
    if xi <= 0:
        raise ValueError("xi must be positive")
    if saved.weights is None or saved.acts is None:
        raise ValueError("saved result does not carry operands")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_Q = xi * (grad_out.T @ saved.acts)
    grad_q = xi * (grad_out @ saved.weights)
    return grad_Q, grad_q
