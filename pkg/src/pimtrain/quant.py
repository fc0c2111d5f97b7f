"""Uniform quantizers and bit-plane decomposition of quantized operands.

Activations are quantized to b_a-bit codes on [0, 1], weights to signed
b_w-bit codes on [-1, 1] with a tanh/max normalization and a separately
reported digital scale. Quantized operands can then be decomposed into the
slices an analog MAC array consumes: base-2^m digit planes for activations
(DAC resolution m) and sign-carrying binary planes for weights.

Rounding is half-away-from-zero throughout; it is symmetric for signed
values and all downstream reference evaluations assume the same rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RANGE_UNIT = "unit"                # values in [0, 1]
RANGE_UNIT_SIGNED = "unit_signed"  # values in [-1, 1]
RANGE_UNBOUNDED = "unbounded"

KIND_ACT_SLICES = "activation_slices"
KIND_WEIGHT_BITS = "weight_bits"


def round_half_away(x):
    """Round to nearest integer with ties away from zero.

    np.round ties to even, which would disagree with the integer reference
    evaluation, so every rounding site goes through this helper.
    """
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QTensor:
    """A real tensor annotated with its quantization grid.

    codes, when present, are the integer levels reproducing data exactly:
    data = codes / (2^bits - 1) for unit range, codes / (2^(bits-1) - 1)
    for unit_signed range.
    """

    data: np.ndarray
    bits: float  # positive int, or math.inf for unquantized
    range: str
    codes: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        if self.codes is not None:
            object.__setattr__(self, "codes", np.asarray(self.codes, dtype=np.int64))
            if self.codes.shape != self.data.shape:
                raise ValueError("codes shape does not match data shape")

    @property
    def levels(self) -> int:
        """Denominator of the code grid."""
        if not math.isfinite(self.bits):
            raise ValueError("infinite-precision tensor has no code grid")
        if self.range == RANGE_UNIT:
            return 2 ** int(self.bits) - 1
        if self.range == RANGE_UNIT_SIGNED:
            return 2 ** (int(self.bits) - 1) - 1
        raise ValueError(f"no code grid for range {self.range!r}")


@dataclass(frozen=True)
class BitPlanes:
    """Integer planes reconstructing a quantized tensor.

    base_scale * sum_k plane_weights[k] * planes[k] reproduces the source
    tensor exactly (in rational arithmetic).
    """

    planes: list = field(default_factory=list)
    plane_weights: list = field(default_factory=list)
    base_scale: float = 1.0
    kind: str = KIND_ACT_SLICES

    def __post_init__(self):
        if len(self.planes) != len(self.plane_weights):
            raise ValueError("planes and plane_weights length mismatch")

    def reconstruct(self) -> np.ndarray:
        acc = np.zeros(self.planes[0].shape, dtype=np.float64)
        for p, w in zip(self.planes, self.plane_weights):
            acc += float(w) * p
        return self.base_scale * acc


def quantize_activation(x, b_a: int) -> QTensor:
    """Clip to [0, 1] and quantize to b_a-bit unsigned codes.

    The training-time backward contract is the conventional pass-through
    estimator: identity inside [0, 1], zero outside (see activation_ste_mask).
    """
    if b_a < 1:
        raise ValueError(f"b_a must be >= 1, got {b_a}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise ValueError(f"non-finite activation at index {tuple(bad)}")
    lv = 2 ** b_a - 1
    # clipped input is nonnegative, so half-away == floor(x + 1/2)
    codes = np.floor(np.clip(x, 0.0, 1.0) * lv + 0.5).astype(np.int64)
    return QTensor(codes / lv, b_a, RANGE_UNIT, codes)


def activation_ste_mask(x) -> np.ndarray:
    """Gradient mask of quantize_activation: 1 on [0, 1], 0 outside."""
    x = np.asarray(x)
    return ((x >= 0.0) & (x <= 1.0)).astype(np.float64)


def quantize_weight(W, b_w: int, n_out: int) -> tuple[QTensor, float]:
    """Quantize weights to signed b_w-bit codes on [-1, 1], tanh-normalized.

    Returns the unscaled quantized tensor q and the digital scale
    s = 1 / sqrt(n_out * var(q)). The analog array stores q; s is applied
    digitally after recombination. Gradients pass straight through the
    whole map, with s treated as a constant.

    Degenerate inputs are handled rather than rejected so random-init
    corner cases cannot abort a run: all-zero W gives q = 0 with s = 1;
    zero variance with nonzero q falls back to one quantization step
    squared as the variance floor.
    """
    if b_w < 2:
        raise ValueError(f"b_w must be >= 2, got {b_w}")
    if n_out < 1:
        raise ValueError(f"n_out must be >= 1, got {n_out}")
    W = np.asarray(W, dtype=np.float64)
    lv = 2 ** (b_w - 1) - 1
    t = np.tanh(W)
    tmax = np.abs(t).max() if t.size else 0.0
    if tmax == 0.0:
        codes = np.zeros(W.shape, dtype=np.int64)
        return QTensor(codes.astype(np.float64), b_w, RANGE_UNIT_SIGNED, codes), 1.0
    codes = round_half_away(t / tmax * lv).astype(np.int64)
    q = codes / lv
    var = float(np.var(q))
    if var == 0.0:
        var = 1.0 / lv ** 2
    s = 1.0 / math.sqrt(n_out * var)
    return QTensor(q, b_w, RANGE_UNIT_SIGNED, codes), s


def decompose_activation(q: QTensor, m: int) -> BitPlanes:
    """Split b_a-bit activation codes into base-2^m digit planes, LSB first.

    m is the DAC resolution and must divide b_a.
    """
    if q.range != RANGE_UNIT or q.codes is None:
        raise ValueError("expected a unit-range quantized tensor with codes")
    b_a = int(q.bits)
    if m < 1 or b_a % m != 0:
        raise ValueError(f"dac bits m={m} must divide b_a={b_a}")
    delta = 2 ** m
    planes = []
    weights = []
    for k in range(b_a // m):
        planes.append((q.codes >> (m * k)) & (delta - 1))
        weights.append(delta ** k)
    return BitPlanes(planes, weights, 1.0 / (2 ** b_a - 1), KIND_ACT_SLICES)


def decompose_weight_bits(Q: QTensor, b_w: int) -> BitPlanes:
    """Split signed weight codes into b_w binary planes.

    Two's-complement layout: plane k carries weight 2^k except the MSB
    plane, which carries -2^(b_w-1). Every code in the symmetric range
    reconstructs exactly.
    """
    if Q.range != RANGE_UNIT_SIGNED:
        raise ValueError("expected a unit_signed tensor")
    if Q.codes is None:
        raise ValueError("weight tensor carries no codes")
    if int(Q.bits) != b_w:
        raise ValueError(f"tensor is {Q.bits}-bit, requested {b_w}")
    lv = 2 ** (b_w - 1) - 1
    if np.any(np.abs(Q.codes) > lv):
        raise ValueError("codes out of range for bit width")
    unsigned = Q.codes & (2 ** b_w - 1)  # two's complement in b_w bits
    planes = []
    weights = []
    for k in range(b_w):
        planes.append((unsigned >> k) & 1)
        weights.append(-(2 ** k) if k == b_w - 1 else 2 ** k)
    return BitPlanes(planes, weights, 1.0 / lv, KIND_WEIGHT_BITS)


def split_signed(Q: QTensor) -> tuple[QTensor, QTensor]:
    """Split into non-negative and non-positive parts; parts sum to Q exactly.

    The backward contract of each part is the indicator of its sign region,
    so the two gradients sum to the identity.
    """
    pos = np.maximum(Q.data, 0.0)
    neg = np.minimum(Q.data, 0.0)
    cp = cn = None
    if Q.codes is not None:
        cp = np.maximum(Q.codes, 0)
        cn = np.minimum(Q.codes, 0)
    return (
        QTensor(pos, Q.bits, Q.range, cp),
        QTensor(neg, Q.bits, Q.range, cn),
    )
