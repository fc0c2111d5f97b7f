"""Exact rational reference for the three MAC decomposition schemes.

Evaluates one analog MAC group in fractions.Fraction arithmetic, with
half-away-from-zero rounding decided exactly on the rational value. This is
a deliberately independent code path from the fast kernels: it is the
ground truth the simulator is checked against, both in the test suite and
through the `oracle` CLI command on a shipped case file.

Inputs are integer codes: weight codes in the symmetric signed range of
b_w bits, activation codes in [0, 2^b_a - 1]. Outputs are Fractions; the
fast path must agree with float(result) bit-for-bit after its own float64
recombination, which holds because every recombination term is an integer
multiple of a power-of-two-free rational with small numerator.
"""
from __future__ import annotations

from fractions import Fraction


def round_half_away_exact(x: Fraction) -> int:
    """Half-away-from-zero rounding of an exact rational."""
    n, d = x.numerator, x.denominator
    if n >= 0:
        return (2 * n + d) // (2 * d)
    return -((-2 * n + d) // (2 * d))


def _act_digits(code: int, b_a: int, m: int) -> list[int]:
    delta = 2 ** m
    return [(code >> (m * k)) & (delta - 1) for k in range(b_a // m)]


def _weight_bits(code: int, b_w: int) -> list[int]:
    u = code & (2 ** b_w - 1)
    return [(u >> k) & 1 for k in range(b_w)]


def mac_native_exact(wcodes, acodes, b_w, b_a, m, b_imc,
                     return_codes=False):
    """Native scheme: signed weights MAC'd per activation digit plane."""
    n = len(wcodes)
    delta = 2 ** m
    scale = Fraction(
        (2 ** b_imc - 1) * (2 ** b_a - 1), n * (delta - 1)
    )
    wq = [Fraction(w, 2 ** (b_w - 1) - 1) for w in wcodes]
    total = Fraction(0)
    codes = []
    for k in range(b_a // m):
        acc = Fraction(0)
        for i, a in enumerate(acodes):
            d = (a >> (m * k)) & (delta - 1)
            acc += wq[i] * Fraction(d, 2 ** b_a - 1)
        code = round_half_away_exact(scale * acc)
        codes.append(code)
        total += Fraction(delta ** k) * Fraction(code, 1) / scale
    if return_codes:
        return total, codes
    return total


def mac_differential_exact(wcodes, acodes, b_w, b_a, m, b_imc,
                           return_codes=False):
    """Differential scheme: positive and negative branches converted apart."""
    n = len(wcodes)
    delta = 2 ** m
    scale = Fraction(
        (2 ** b_imc - 1) * (2 ** b_a - 1), n * (delta - 1)
    )
    lv = 2 ** (b_w - 1) - 1
    total = Fraction(0)
    codes = []
    for k in range(b_a // m):
        acc_p = Fraction(0)
        acc_n = Fraction(0)
        for w, a in zip(wcodes, acodes):
            d = Fraction((a >> (m * k)) & (delta - 1), 2 ** b_a - 1)
            if w > 0:
                acc_p += Fraction(w, lv) * d
            elif w < 0:
                acc_n += Fraction(-w, lv) * d
        cp = round_half_away_exact(scale * acc_p)
        cn = round_half_away_exact(scale * acc_n)
        codes.extend([cp, cn])
        total += Fraction(delta ** k) * Fraction(cp - cn, 1) / scale
    if return_codes:
        return total, codes
    return total


def mac_bit_serial_exact(wcodes, acodes, b_w, b_a, m, b_imc,
                         return_codes=False):
    """Bit-serial scheme: binary weight planes with a sign-carrying MSB."""
    n = len(wcodes)
    delta = 2 ** m
    lv = 2 ** (b_w - 1) - 1
    scale = Fraction(
        (2 ** b_imc - 1) * lv * (2 ** b_a - 1), n * (delta - 1)
    )
    total = Fraction(0)
    codes = []
    for k in range(b_w):
        sgn = -1 if k == b_w - 1 else 1
        for l in range(b_a // m):
            acc = Fraction(0)
            for w, a in zip(wcodes, acodes):
                bit = ((w & (2 ** b_w - 1)) >> k) & 1
                d = (a >> (m * l)) & (delta - 1)
                acc += Fraction(bit, lv) * Fraction(d, 2 ** b_a - 1)
            code = round_half_away_exact(scale * acc)
            codes.append(code)
            total += sgn * (2 ** k) * (delta ** l) * Fraction(code, 1) / scale
    if return_codes:
        return total, codes
    return total


def mac_exact_dot(wcodes, acodes, b_w, b_a) -> Fraction:
    """The un-digitized inner product of the dequantized operands."""
    lv = 2 ** (b_w - 1) - 1
    acc = Fraction(0)
    for w, a in zip(wcodes, acodes):
        acc += Fraction(w, lv) * Fraction(a, 2 ** b_a - 1)
    return acc


SCHEME_FUNCS = {
    "native": mac_native_exact,
    "differential": mac_differential_exact,
    "bit_serial": mac_bit_serial_exact,
}


def evaluate_case(case: dict) -> Fraction:
    """Evaluate one case dict {scheme, b_w, b_a, m, b_imc, wcodes, acodes}."""
    fn = SCHEME_FUNCS[case["scheme"]]
    return fn(
        case["wcodes"], case["acodes"], case["b_w"], case["b_a"],
        case["m"], case["b_imc"],
    )
