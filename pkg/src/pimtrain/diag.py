"""Analysis studies run as standalone procedures.

Each study is deterministic given its seed and emits a SweepTable carrying
the config hash. They quantify, in a controlled toy setting, the effects
the training techniques are built to counter: output-scale enlargement
from coarse MAC digitization, BN-statistics drift under interface
non-idealities, and the layer-to-layer gradient-variance ratio.
"""
from __future__ import annotations

import math

import numpy as np

from .models import build_block_stack
from .nn import Context, EvalInterface, im2col
from .nonideal import NoiseModel, error_std_sweep
from .pim import PimConfig, pim_linear
from .quant import quantize_activation, quantize_weight
from .report import SweepTable, config_hash


def _toy_conv_operands(channels, c_out, hw, batch, b_w, b_a, rng):
    """The toy conv study setup: uniform inputs, Kaiming weights, 3x3 'same'
    padding, im2col rows. Returns (act QTensor rows, weight QTensor, s)."""
    x = rng.uniform(0.0, 1.0, (batch, channels, hw, hw))
    qx = quantize_activation(x, b_a)
    cols, Ho, Wo = im2col(qx.data, 3, 3, 1, 1)
    qcols = quantize_activation(cols, b_a)  # codes for the grouped MAC
    W = rng.normal(0.0, math.sqrt(2.0 / (channels * 9)), (c_out, channels * 9))
    qW, s = quantize_weight(W, b_w, c_out * 9)
    return qcols, qW, s, (batch, Ho, Wo, c_out)


def _channel_centered_std(z2d, c_out):
    """Pooled per-channel-centered std; per-channel means are BN's business,
    so the scale comparison removes them the same way BN would."""
    var = z2d.reshape(-1, c_out).var(axis=0).mean()
    return math.sqrt(var)


def scale_ratio_study(b_imc_list, channels=16, samples=100, c_out=32, hw=5,
                      scheme="bit_serial", dac_bits=1, b_w=4, b_a=4,
                      seed=0) -> SweepTable:
    """Output-scale ratio (digitized vs exact MAC) per converter resolution.

    Toy convolution, `samples` input images, one group per unit of
    `channels` input channels. rho(b) is the pooled per-channel-centered
    std ratio between the digitized and the exact grouped MAC.
    """
    if samples < 100:
        raise ValueError("samples must be >= 100 batch rows")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(40,)))
    qcols, qW, _, _ = _toy_conv_operands(channels, c_out, hw, samples,
                                         b_w, b_a, rng)
    cells = []
    exact_std = None
    for b in b_imc_list:
        bb = math.inf if b in ("inf", math.inf) else int(b)
        cfg = PimConfig(scheme=scheme, n_group=channels * 9, b_imc=bb,
                        dac_bits=dac_bits, b_w=b_w, b_a=b_a,
                        unit_in_channels=channels)
        res = pim_linear(qW, qcols, cfg, compute_exact=True)
        if exact_std is None:
            exact_std = _channel_centered_std(res.value_exact, c_out)
        cells.append(_channel_centered_std(res.value_pim, c_out) / exact_std)
    meta = {"study": "scale_ratio", "seed": seed,
            "config_hash": config_hash(dict(
                b_imc=list(map(str, b_imc_list)), channels=channels,
                samples=samples, c_out=c_out, hw=hw, scheme=scheme,
                dac_bits=dac_bits, b_w=b_w, b_a=b_a, seed=seed))}
    return SweepTable({"b_imc": [str(b) for b in b_imc_list]},
                      np.array(cells), meta)


def bn_drift_study(sigmas, curves=None, b_imc=7, channels=16, c_out=32, hw=5,
                   samples=100, scheme="bit_serial", dac_bits=1, b_w=4,
                   b_a=4, unit_out_channels=8, seed=0) -> SweepTable:
    """Relative drift of per-channel output statistics under non-idealities.

    Compares the toy conv's output mean/variance between the ideal
    interface and (curves, sigma); cells are the worst drift over channels,
    axes (sigma, statistic). Mean drift is measured relative to the
    channel's ideal std (the scale BN normalizes by; a pure relative mean
    would blow up on near-zero-mean channels), variance drift relative to
    the ideal variance.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(41,)))
    qcols, qW, _, _ = _toy_conv_operands(channels, c_out, hw, samples,
                                         b_w, b_a, rng)
    base_cfg = PimConfig(scheme=scheme, n_group=channels * 9, b_imc=b_imc,
                         dac_bits=dac_bits, b_w=b_w, b_a=b_a,
                         unit_in_channels=channels,
                         unit_out_channels=unit_out_channels)
    ref = pim_linear(qW, qcols, base_cfg, compute_exact=False)
    mu0 = ref.value_pim.reshape(-1, c_out).mean(axis=0)
    v0 = ref.value_pim.reshape(-1, c_out).var(axis=0)
    cells = np.zeros((len(sigmas), 2))
    from .pim import NonIdealModel
    for i, sig in enumerate(sigmas):
        noise = NoiseModel(float(sig), seed=seed + 100) if sig > 0 else None
        cfg = base_cfg.with_nonideal(
            NonIdealModel(curves=curves, noise=noise)
            if (curves is not None or noise is not None) else None)
        rng_noise = noise.stream(0, i) if noise is not None else None
        res = pim_linear(qW, qcols, cfg, rng=rng_noise, compute_exact=False)
        mu = res.value_pim.reshape(-1, c_out).mean(axis=0)
        v = res.value_pim.reshape(-1, c_out).var(axis=0)
        cells[i, 0] = np.max(np.abs(mu - mu0) / np.maximum(np.sqrt(v0), 1e-12))
        cells[i, 1] = np.max(np.abs(v - v0) / np.maximum(v0, 1e-24))
    meta = {"study": "bn_drift", "seed": seed, "b_imc": b_imc,
            "uses_curves": curves is not None,
            "config_hash": config_hash(dict(
                sigmas=[float(s) for s in sigmas], b_imc=b_imc,
                channels=channels, samples=samples, seed=seed,
                uses_curves=curves is not None))}
    return SweepTable({"sigma": [float(s) for s in sigmas],
                       "stat": ["mean", "var"]}, cells, meta)


def predicted_grad_ratio(xi, rho, n_in, n_out) -> float:
    """Adjacent-layer gradient-variance ratio predicted by the mean-field
    training-dynamics analysis."""
    return (xi / rho) ** 2 * (n_out / n_in)


def gradient_ratio_check(blocks=6, width=144, batches=100, batch_size=256,
                         scheme="bit_serial", b_imc="inf", dac_bits=1,
                         b_w=4, b_a=4, xi_policy="rescale", eta=1.0,
                         seed=0) -> SweepTable:
    """Measured vs predicted layerwise gradient-variance ratios.

    Identity-activation dense stack in the quasi-linear regime; a random
    unit gradient is injected at the top and per-layer input gradients are
    captured. xi_policy 'rescale' applies the measured backward scale,
    'one' fixes xi = 1 (the drift ablation).
    """
    if blocks < 4:
        raise ValueError("need at least 4 blocks")
    stack = build_block_stack(width=width, depth=blocks, scheme=scheme,
                              b_imc=b_imc, dac_bits=dac_bits, b_w=b_w,
                              b_a=b_a, activation="identity",
                              rescale_backward=(xi_policy == "rescale"),
                              eta=eta, seed=seed)
    layers = stack.layers
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(42,)))
    measured = np.zeros((batches, blocks - 1))
    predicted = np.zeros((batches, blocks - 1))
    for t in range(batches):
        # inputs matched to the block output distribution (stationary stack)
        x = np.clip(rng.normal(0.5, 0.15, (batch_size, width)), 0.0, 1.0)
        acts = []
        h = x
        for l in layers:
            acts.append(h)
            h = l.forward(h, Context(mode="train"))
        g = rng.standard_normal(h.shape)
        grads = [None] * blocks
        for i in reversed(range(blocks)):
            stackzero = layers[i]
            for p in stackzero.params():
                p.grad[...] = 0.0
            g = stackzero.backward(g)
            grads[i] = g
        gvar = [float(np.var(gr)) for gr in grads]
        for i in range(blocks - 1):
            measured[t, i] = gvar[i] / gvar[i + 1]
            predicted[t, i] = predicted_grad_ratio(
                layers[i].last_xi, layers[i].last_rho, width, width)
    cells = np.stack([measured.mean(axis=0), predicted.mean(axis=0)], axis=1)
    meta = {"study": "gradient_ratio", "seed": seed, "xi_policy": xi_policy,
            "b_imc": str(b_imc), "scheme": scheme,
            "config_hash": config_hash(dict(
                blocks=blocks, width=width, batches=batches,
                batch_size=batch_size, scheme=scheme, b_imc=str(b_imc),
                dac_bits=dac_bits, xi_policy=xi_policy, eta=eta, seed=seed))}
    return SweepTable({"pair": [f"{i}/{i + 1}" for i in range(blocks - 1)],
                       "kind": ["measured", "predicted"]}, cells, meta)


def noise_error_study(b=7, sigmas=(0.0, 0.35, 1.0, 2.0), samples=200000,
                      curve=None, seed=0) -> SweepTable:
    """error_std_sweep packaged as a SweepTable."""
    table = error_std_sweep(b, list(sigmas), samples, curve=curve, seed=seed)
    cells = np.array([v for _, v in table])
    meta = {"study": "noise_error", "seed": seed, "bits": b,
            "config_hash": config_hash(dict(
                b=b, sigmas=[float(s) for s in sigmas], samples=samples,
                seed=seed))}
    return SweepTable({"sigma": [float(s) for s in sigmas]}, cells, meta)
