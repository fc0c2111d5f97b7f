"""Pure-numpy reference implementation of the layer-level MAC kernel.

Semantics contract shared with the compiled extension (_mackern):

* Activation codes (rows, n_in) and signed weight codes (n_out, n_in) are
  processed in groups of n_group along the input axis; n_in must be an
  exact multiple of n_group (callers pad with zero channels).
* Per group, the scheme-specific plane conversions are evaluated; each
  conversion produces one integer converter code.
* Conversion order per (row, out): groups ascending, then planes; native
  uses activation planes LSB-first, differential adds a positive branch
  then a negative branch per plane, bit-serial iterates weight bits
  LSB-first with activation planes inner. The pre-drawn noise array is
  consumed in exactly this order.
* Recombination accumulates an integer numerator and performs a single
  float64 division, so results are exact, independent of summation order,
  and bit-identical between backends and thread counts.

With curves/noise absent the converter codes are computed in pure integer
arithmetic (half-away-from-zero on the exact rational level), matching the
Fraction-based oracle bit-for-bit.
"""
from __future__ import annotations

import numpy as np

SCHEME_NATIVE = 0
SCHEME_DIFFERENTIAL = 1
SCHEME_BIT_SERIAL = 2

_SCHEME_IDS = {"native": SCHEME_NATIVE,
               "differential": SCHEME_DIFFERENTIAL,
               "bit_serial": SCHEME_BIT_SERIAL}


def scheme_id(name: str) -> int:
    try:
        return _SCHEME_IDS[name]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}") from None


def conversions_per_group(scheme: int, b_w: int, b_a: int, m: int) -> int:
    planes = b_a // m
    if scheme == SCHEME_NATIVE:
        return planes
    if scheme == SCHEME_DIFFERENTIAL:
        return 2 * planes
    if scheme == SCHEME_BIT_SERIAL:
        return b_w * planes
    raise ValueError(f"bad scheme id {scheme}")


def _int_matmul(a, b):
    # Exact integer matmul through float64 BLAS; operands are small codes
    # so every partial sum stays far below 2**53.
    out = a.astype(np.float64) @ b.astype(np.float64)
    return np.rint(out).astype(np.int64)


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _ideal_code(num, den):
    # round_half_away(num/den) for integer num, positive integer den
    num = num.astype(np.int64)
    neg = num < 0
    mag = np.abs(num)
    code = (2 * mag + den) // (2 * den)
    return np.where(neg, -code, code)


def _interp_curve(curves, curve_idx, a):
    """Piecewise-linear curve evaluation, boundary segments extrapolated.

    a: (rows, n_out) analog levels; curves: (n_curves, n_pts) measured
    levels at integer codes; curve_idx: (n_out,) curve per output column.
    """
    n_pts = curves.shape[1]
    idx = np.floor(a).astype(np.int64)
    np.clip(idx, 0, n_pts - 2, out=idx)
    t = a - idx
    y0 = curves[curve_idx[None, :], idx]
    y1 = curves[curve_idx[None, :], idx + 1]
    return y0 + t * (y1 - y0)


def mac_layer(scheme, acodes, wcodes, n_group, b_imc, b_w, b_a, m,
              curves=None, curve_idx=None, noise=None, capture_codes=False,
              n_threads=0):
    """Evaluate every MAC group of a layer; returns (value_pim, codes|None).

    acodes: (rows, n_in) int, wcodes: (n_out, n_in) int, b_imc finite.
    noise, when present, is (rows, n_out, n_conv_total) pre-drawn LSB noise.
    """
    acodes = np.ascontiguousarray(acodes, dtype=np.int64)
    wcodes = np.ascontiguousarray(wcodes, dtype=np.int64)
    rows, n_in = acodes.shape
    n_out = wcodes.shape[0]
    if wcodes.shape[1] != n_in:
        raise ValueError("weight/activation input width mismatch")
    if n_in % n_group != 0:
        raise ValueError(f"n_in={n_in} not a multiple of n_group={n_group}")
    if b_a % m != 0:
        raise ValueError("dac bits must divide b_a")
    groups = n_in // n_group
    planes = b_a // m
    delta = 2 ** m
    cmax = 2 ** b_imc - 1
    nonideal = curves is not None or noise is not None
    if curves is not None and curve_idx is None:
        raise ValueError("curves given without curve assignment")
    n_conv = groups * conversions_per_group(scheme, b_w, b_a, m)
    if noise is not None and noise.shape != (rows, n_out, n_conv):
        raise ValueError(f"noise shape {noise.shape} != {(rows, n_out, n_conv)}")

    codes_out = (
        np.zeros((rows, n_out, n_conv), dtype=np.int32) if capture_codes else None
    )
    T = np.zeros((rows, n_out), dtype=np.int64)  # integer numerator accum
    conv = 0

    def convert(num_int, den, signed_range):
        """One converter batch: ideal integer rounding or curve+noise path."""
        nonlocal conv
        if not nonideal:
            code = _ideal_code(num_int, den)
        else:
            a = num_int.astype(np.float64) / float(den)
            v = _interp_curve(curves, curve_idx, a) if curves is not None else a
            if noise is not None:
                v = v + noise[:, :, conv]
            code = _round_half_away(v)
            lo = -cmax if signed_range else 0
            code = np.clip(code, lo, cmax).astype(np.int64)
        if codes_out is not None:
            codes_out[:, :, conv] = code
        conv += 1
        return code

    for g in range(groups):
        asl = acodes[:, g * n_group:(g + 1) * n_group]
        wsl = wcodes[:, g * n_group:(g + 1) * n_group]
        if scheme == SCHEME_NATIVE:
            den = n_group * (delta - 1) * (2 ** (b_w - 1) - 1)
            for k in range(planes):
                d = (asl >> (m * k)) & (delta - 1)
                s = _int_matmul(d, wsl.T)
                code = convert((cmax * s), den, signed_range=True)
                T += (delta ** k) * code
        elif scheme == SCHEME_DIFFERENTIAL:
            den = n_group * (delta - 1) * (2 ** (b_w - 1) - 1)
            wp = np.maximum(wsl, 0)
            wn = np.maximum(-wsl, 0)
            for k in range(planes):
                d = (asl >> (m * k)) & (delta - 1)
                cp = convert(cmax * _int_matmul(d, wp.T), den, signed_range=False)
                cn = convert(cmax * _int_matmul(d, wn.T), den, signed_range=False)
                T += (delta ** k) * (cp - cn)
        elif scheme == SCHEME_BIT_SERIAL:
            den = n_group * (delta - 1)
            wu = wsl & (2 ** b_w - 1)
            for kw in range(b_w):
                wb = (wu >> kw) & 1
                sgn = -1 if kw == b_w - 1 else 1
                for l in range(planes):
                    d = (asl >> (m * l)) & (delta - 1)
                    code = convert(cmax * _int_matmul(d, wb.T), den,
                                   signed_range=False)
                    T += sgn * (2 ** kw) * (delta ** l) * code
        else:
            raise ValueError(f"bad scheme id {scheme}")

    num = float(n_group * (delta - 1)) * T.astype(np.float64)
    den_out = float(cmax) * (2 ** b_a - 1)
    if scheme == SCHEME_BIT_SERIAL:
        den_out *= 2 ** (b_w - 1) - 1
    value = num / den_out
    return value, codes_out
