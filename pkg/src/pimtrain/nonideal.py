"""Imperfect analog-to-digital interface models.

Measured transfer curves (imperfect linearity), Gaussian converter noise in
LSB units, synthetic gain/offset variation banks, and the error-std sweep
used to read off effective resolution under noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .quant import round_half_away

CURVE_MAGIC = "pim-curves"
CURVE_VERSION = "v1"


@dataclass(frozen=True)
class TransferCurve:
    """Measured converter response: observed level per ideal code, LSB units.

    Evaluation between codes is piecewise linear; outside [0, 2^b - 1] the
    boundary segments extrapolate linearly (signed native levels hit the
    negative side, where an affine curve stays affine).
    """

    bits: int
    measured_levels: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.measured_levels, dtype=np.float64)
        if lv.ndim != 1 or lv.shape[0] != 2 ** self.bits:
            raise ValueError(
                f"curve needs {2 ** self.bits} points for {self.bits} bits, "
                f"got {lv.shape}")
        if not np.all(np.isfinite(lv)):
            raise ValueError("non-finite measured level")
        object.__setattr__(self, "measured_levels", lv)

    @property
    def ideal_codes(self) -> np.ndarray:
        return np.arange(2 ** self.bits)

    def __call__(self, a):
        a = np.asarray(a, dtype=np.float64)
        n = self.measured_levels.shape[0]
        idx = np.clip(np.floor(a).astype(np.int64), 0, n - 2)
        t = a - idx
        y0 = self.measured_levels[idx]
        y1 = self.measured_levels[idx + 1]
        return y0 + t * (y1 - y0)


@dataclass(frozen=True)
class CurveBank:
    """A set of converter curves plus the output-column assignment rule."""

    curves: tuple
    bits: int

    def __post_init__(self):
        if len(self.curves) < 1:
            raise ValueError("curve bank is empty")
        for c in self.curves:
            if c.bits != self.bits:
                raise ValueError("mixed curve resolutions in one bank")

    def __len__(self):
        return len(self.curves)

    def as_matrix(self) -> np.ndarray:
        return np.stack([c.measured_levels for c in self.curves])

    def assign(self, n_out: int, unit_out_channels: int) -> np.ndarray:
        """Curve index per output column: unit_out_channels blocks,
        round-robin over the bank."""
        blocks = np.arange(n_out) // max(1, unit_out_channels)
        return (blocks % len(self.curves)).astype(np.int64)


@dataclass(frozen=True)
class NoiseModel:
    """Converter thermal noise: RMS sigma in LSB, seeded stream."""

    sigma_lsb: float
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.sigma_lsb) and self.sigma_lsb >= 0):
            raise ValueError(f"bad sigma_lsb {self.sigma_lsb}")

    def stream(self, *path) -> np.random.Generator:
        """Independent generator for a (layer, batch, ...) path; identical
        path always reproduces the identical stream."""
        return np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=tuple(int(p) for p in path))
        )


@dataclass(frozen=True)
class VariationSpec:
    """Gain/offset spread of a fabricated converter population."""

    sigma_offset: float
    sigma_gain: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma_offset < 0 or self.sigma_gain < 0:
            raise ValueError("sigmas must be nonnegative")


def apply_interface(a, curve: TransferCurve | None, noise: NoiseModel | None,
                    b: int, rng: np.random.Generator | None = None,
                    signed_range: bool = False):
    """One converter use: code = clamp(round(curve(a) + eps)).

    Noise is injected after the curve and before rounding; identity curve
    and zero noise reduce to plain rounding. rng carries the noise stream
    (derive it from noise.stream(...) for reproducibility).
    """
    a = np.asarray(a, dtype=np.float64)
    v = curve(a) if curve is not None else a
    if noise is not None and noise.sigma_lsb > 0:
        if rng is None:
            rng = noise.stream()
        v = v + rng.standard_normal(a.shape) * noise.sigma_lsb
    code = round_half_away(v)
    cmax = 2 ** b - 1
    lo = -cmax if signed_range else 0
    return np.clip(code, lo, cmax).astype(np.int64)


def identity_curve(b: int) -> TransferCurve:
    return TransferCurve(b, np.arange(2 ** b, dtype=np.float64))


def generate_variation_curves(b: int, count: int,
                              spec: VariationSpec) -> CurveBank:
    """Affine curves gain_j * code + offset_j with seeded normal draws."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(spec.seed)
    gains = rng.normal(1.0, spec.sigma_gain, count)
    offsets = rng.normal(0.0, spec.sigma_offset, count)
    codes = np.arange(2 ** b, dtype=np.float64)
    curves = tuple(
        TransferCurve(b, g * codes + o) for g, o in zip(gains, offsets)
    )
    return CurveBank(curves, b)


def save_curve_bank(path, bank: CurveBank):
    with open(path, "w") as f:
        f.write(f"{CURVE_MAGIC} {CURVE_VERSION} bits={bank.bits} "
                f"count={len(bank)}\n")
        for c in bank.curves:
            f.write(" ".join(repr(float(v)) for v in c.measured_levels) + "\n")


def load_curve_bank(path, b: int | None = None) -> CurveBank:
    """Parse a curve file; malformed content reports the offending line."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty curve file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != CURVE_MAGIC or head[1] != CURVE_VERSION:
        raise ValueError(f"{path}:1: bad header {lines[0]!r}")
    try:
        bits = int(head[2].removeprefix("bits="))
        count = int(head[3].removeprefix("count="))
    except ValueError:
        raise ValueError(f"{path}:1: unparsable header fields") from None
    if b is not None and bits != b:
        raise ValueError(f"{path}: file is {bits}-bit, expected {b}-bit")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ValueError(
            f"{path}: header announces {count} curves, found {len(body)}")
    curves = []
    for i, ln in enumerate(body, start=2):
        try:
            vals = np.array([float(tok) for tok in ln.split()])
        except ValueError:
            raise ValueError(f"{path}:{i}: non-numeric entry") from None
        if vals.shape[0] != 2 ** bits:
            raise ValueError(
                f"{path}:{i}: expected {2 ** bits} values, got {vals.shape[0]}")
        curves.append(TransferCurve(bits, vals))
    return CurveBank(tuple(curves), bits)


def error_std_sweep(b: int, sigmas, samples: int, curve: TransferCurve | None = None,
                    seed: int = 0):
    """Std of converter error vs noise level, normalized to the noiseless std.

    Draws analog levels uniformly over the code span, applies the interface,
    and measures std(code - level). The noiseless column of an identity
    curve follows the uniform-quantization closed form; adding noise sigma
    moves the total toward sqrt(1/12 + sigma^2) in LSB units.
    """
    if samples < 1000:
        raise ValueError("samples must be >= 1000")
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 2 ** b - 1, samples)
    ref = curve(a) if curve is not None else a
    out = []
    base = None
    for sig in sigmas:
        noise = NoiseModel(float(sig), seed) if sig > 0 else None
        sub = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(int(1e6 * sig),)))
        code = apply_interface(a, curve, noise, b, rng=sub)
        err_std = float(np.std(code - a))
        if base is None:
            # normalize by the sigma=0 std of the same interface
            code0 = apply_interface(a, curve, None, b)
            base = float(np.std(code0 - a))
        out.append((float(sig), err_std / base))
    return out
