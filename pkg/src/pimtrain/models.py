"""Model builders.

Every builder records its own (kind, kwargs) spec on the Sequential so
checkpoints can rebuild the architecture. Analog-mapped blocks follow the
deployment conventions: the stem convolution and the classifier run
digitally, inputs to the stem stay 8-bit codes, and every other conv block
maps onto the configured MAC scheme.
"""
from __future__ import annotations

import math

import numpy as np

from .nn import (
    AvgPool2d,
    ConvBlock,
    Dense,
    DenseBlock,
    Flatten,
    GlobalAvgPool,
    Sequential,
)
from .pim import PimConfig, default_forward_scale


def _pim_cfg(scheme, b_imc, unit_in_channels, kernel_area, dac_bits, b_w, b_a,
             unit_out_channels):
    return PimConfig(
        scheme=scheme,
        n_group=unit_in_channels * kernel_area,
        b_imc=b_imc,
        dac_bits=dac_bits,
        b_w=b_w,
        b_a=b_a,
        unit_in_channels=unit_in_channels,
        unit_out_channels=unit_out_channels,
    )


def build_cnn(in_ch=3, classes=10, blocks=(16, 16, 32, 32), pool_after=(0, 1, 2),
              scheme="bit_serial", b_imc=5, unit_in_channels=16, dac_bits=4,
              b_w=4, b_a=4, unit_out_channels=8, eta="auto",
              rescale_backward=True, pim_enabled=True, seed=0):
    """Plain CNN: digital stem conv + analog-mapped conv blocks + digital head.

    pim_enabled=False builds the conventionally-quantized twin (all blocks
    digital) used as the deployment baseline. eta="auto" picks the forward
    rescale constant for (scheme, b_imc); a number overrides it.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    eta_val = default_forward_scale(scheme, b_imc) if eta == "auto" else float(eta)
    layers = [
        # stem: digital, 8-bit input codes, no input normalization
        ConvBlock(in_ch, blocks[0], b_w=b_w, b_a=8, pim_cfg=None, rng=rng),
    ]
    if 0 in pool_after:
        layers.append(AvgPool2d(2))
    for i in range(1, len(blocks)):
        cfg = None
        e = 1.0
        if pim_enabled:
            cfg = _pim_cfg(scheme, b_imc, unit_in_channels, 9, dac_bits,
                           b_w, b_a, unit_out_channels)
            e = eta_val
        layers.append(ConvBlock(blocks[i - 1], blocks[i], b_w=b_w, b_a=b_a,
                                pim_cfg=cfg, eta=e,
                                rescale_backward=rescale_backward, rng=rng))
        if i in pool_after:
            layers.append(AvgPool2d(2))
    layers.append(GlobalAvgPool())
    layers.append(Dense(blocks[-1], classes, b_w=b_w, b_a=b_a, rng=rng))
    spec = {"kind": "cnn", "kwargs": dict(
        in_ch=in_ch, classes=classes, blocks=list(blocks),
        pool_after=list(pool_after), scheme=scheme,
        b_imc=(b_imc if math.isfinite(b_imc) else "inf"),
        unit_in_channels=unit_in_channels, dac_bits=dac_bits, b_w=b_w,
        b_a=b_a, unit_out_channels=unit_out_channels, eta=eta,
        rescale_backward=rescale_backward, pim_enabled=pim_enabled,
        seed=seed)}
    return Sequential(layers, spec=spec)


def build_mlp(n_in=2, classes=2, hidden=(32,), b_w=4, b_a=4, scheme="bit_serial",
              b_imc="inf", unit_in_channels=0, dac_bits=4, pim_enabled=False,
              eta="auto", rescale_backward=True, unit_out_channels=8, seed=0):
    """Small dense net on flat features; first block quantizes inputs at b_a."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    b = math.inf if b_imc == "inf" else b_imc
    eta_val = default_forward_scale(scheme, b) if eta == "auto" else float(eta)
    layers = []
    prev = n_in
    for h in hidden:
        cfg = None
        e = 1.0
        if pim_enabled:
            group = unit_in_channels if unit_in_channels else prev
            cfg = PimConfig(scheme=scheme, n_group=group, b_imc=b,
                            dac_bits=dac_bits, b_w=b_w, b_a=b_a,
                            unit_in_channels=group,
                            unit_out_channels=unit_out_channels)
            e = eta_val
        layers.append(DenseBlock(prev, h, b_w=b_w, b_a=b_a, pim_cfg=cfg,
                                 eta=e, rescale_backward=rescale_backward,
                                 rng=rng))
        prev = h
    layers.append(Dense(prev, classes, b_w=b_w, b_a=b_a, rng=rng))
    spec = {"kind": "mlp", "kwargs": dict(
        n_in=n_in, classes=classes, hidden=list(hidden), b_w=b_w, b_a=b_a,
        scheme=scheme, b_imc=("inf" if not math.isfinite(b) else b),
        unit_in_channels=unit_in_channels, dac_bits=dac_bits,
        pim_enabled=pim_enabled, eta=eta, rescale_backward=rescale_backward,
        unit_out_channels=unit_out_channels, seed=seed)}
    return Sequential(layers, spec=spec)


def build_block_stack(width=144, depth=6, classes=None, scheme="bit_serial",
                      b_imc="inf", dac_bits=1, b_w=4, b_a=4,
                      activation="identity", gamma_init=0.15, beta_init=0.5,
                      rescale_backward=True, eta=1.0, seed=0):
    """Repeated identical dense blocks for training-dynamics measurements.

    Identity activation with gamma/beta chosen so block outputs sit inside
    the activation quantizer's pass-through region, keeping the stack in
    the quasi-linear regime the mean-field analysis assumes.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    b = math.inf if b_imc == "inf" else b_imc
    layers = []
    for _ in range(depth):
        cfg = PimConfig(scheme=scheme, n_group=width, b_imc=b,
                        dac_bits=dac_bits, b_w=b_w, b_a=b_a,
                        unit_in_channels=width)
        layers.append(DenseBlock(width, width, b_w=b_w, b_a=b_a, pim_cfg=cfg,
                                 eta=float(eta), activation=activation,
                                 gamma_init=gamma_init, beta_init=beta_init,
                                 rescale_backward=rescale_backward, rng=rng))
    if classes:
        layers.append(Dense(width, classes, b_w=b_w, b_a=b_a, rng=rng))
    spec = {"kind": "stack", "kwargs": dict(
        width=width, depth=depth, classes=classes, scheme=scheme,
        b_imc=("inf" if not math.isfinite(b) else b), dac_bits=dac_bits,
        b_w=b_w, b_a=b_a, activation=activation, gamma_init=gamma_init,
        beta_init=beta_init, rescale_backward=rescale_backward, eta=eta,
        seed=seed)}
    return Sequential(layers, spec=spec)


BUILDERS = {"cnn": build_cnn, "mlp": build_mlp, "stack": build_block_stack}


def build_model(spec: dict) -> Sequential:
    kind = spec.get("kind")
    if kind not in BUILDERS:
        raise ValueError(f"unknown model kind {kind!r}")
    kwargs = dict(spec.get("kwargs", {}))
    if kwargs.get("b_imc") == "inf":
        kwargs["b_imc"] = math.inf
    return BUILDERS[kind](**kwargs)
