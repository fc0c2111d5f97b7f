"""Minimal layer stack with reverse-mode gradients for MAC-array training.

Dense and 2-d convolution blocks share one grouped-MAC path (convolution is
patch extraction followed by the same grouped inner product). A block is
quantize-activation -> analog matmul -> digital weight scale -> forward
rescale -> batch norm -> activation. The backward pass applies the exact
batch-norm gradient, the per-layer backward rescale recorded during the
forward, and the straight-through contracts of both quantizers.

No general autodiff: each layer keeps the context of its last forward and
backward() walks the stack in reverse. Training runs are single-writer;
evaluation noise streams are derived per (layer, batch) so results do not
depend on execution order.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nonideal import CurveBank, NoiseModel
from .pim import MacGroupResult, NonIdealModel, PimConfig, gste_backward, pim_linear
from .quant import (
    QTensor,
    activation_ste_mask,
    quantize_activation,
    quantize_weight,
)

CHECKPOINT_MAGIC = "pimtrain-ckpt"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, layer_id, what="non-finite pre-activation"):
        super().__init__(f"layer {layer_id}: {what}")
        self.layer_id = layer_id


@dataclass
class EvalInterface:
    """Deployment-time analog interface applied to every MAC-mapped block."""

    b_imc: float
    curves: Optional[CurveBank] = None
    noise: Optional[NoiseModel] = None


@dataclass
class Context:
    """Per-forward bookkeeping handed down the stack."""

    mode: str = "train"                 # train | eval | calib
    interface: Optional[EvalInterface] = None
    batch_index: int = 0
    compute_exact: bool = True          # exact twin needed for xi
    n_threads: int = 0

    @property
    def training(self) -> bool:
        return self.mode == "train"

    @property
    def batch_stats(self) -> bool:
        return self.mode in ("train", "calib")


class Param:
    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name, value, decay=True):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.decay = decay


class Layer:
    layer_id = -1

    def params(self):
        return []

    def forward(self, x, ctx: Context):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def state_arrays(self):
        """name -> array mapping persisted in checkpoints."""
        return {p.name: p.value for p in self.params()}

    def load_state_arrays(self, arrays):
        for p in self.params():
            p.value[...] = arrays[p.name]


def kaiming_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def im2col(x, kh, kw, stride, pad):
    """(B,C,H,W) -> (B*Ho*Wo, C*kh*kw) patches, channel-major per patch."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    B, C, H, W = x.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * Ho:stride,
                                 j:j + stride * Wo:stride]
    cols = cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def col2im(cols, x_shape, kh, kw, stride, pad, Ho, Wo):
    """Adjoint of im2col: scatter patch gradients back onto the image."""
    B, C, H, W = x_shape
    xg = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    cols = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                cols[:, :, i, j]
    if pad:
        xg = xg[:, :, pad:-pad, pad:-pad]
    return xg


def _pad_columns(arr, n_in, n_pad):
    if n_pad == n_in:
        return arr
    out = np.zeros(arr.shape[:-1] + (n_pad,), dtype=arr.dtype)
    out[..., :n_in] = arr
    return out


class MacCore:
    """Shared grouped-MAC machinery of dense and conv blocks.

    Handles operand quantization, the analog/exact twin evaluation, the
    recorded backward rescale, and the straight-through gradients. Operates
    on flattened (rows, n_in) activations.
    """

    def __init__(self, n_in, n_out, fan_out, b_w, b_a, pim_cfg,
                 rescale_backward=True):
        self.n_in = n_in
        self.n_out = n_out
        self.fan_out = fan_out          # n_out count used by the weight scale
        self.b_w = b_w                  # None: full precision weights
        self.b_a = b_a                  # None: full precision activations
        self.pim_cfg = pim_cfg          # None: digital exact matmul
        self.rescale_backward = rescale_backward
        self.last_xi = 1.0
        self.last_rho = 1.0
        if pim_cfg is not None:
            if b_w is None or b_a is None:
                raise ValueError("analog MAC needs quantized operands")
            if pim_cfg.b_w != b_w or pim_cfg.b_a != b_a:
                raise ValueError("pim config bit widths disagree with block")
            self.n_pad = -(-n_in // pim_cfg.n_group) * pim_cfg.n_group
        else:
            self.n_pad = n_in

    def effective_cfg(self, ctx: Context):
        cfg = self.pim_cfg
        if cfg is None:
            return None
        itf = ctx.interface
        if itf is not None:
            cfg = cfg.with_b_imc(itf.b_imc)
            if itf.curves is not None or itf.noise is not None:
                cfg = cfg.with_nonideal(
                    NonIdealModel(curves=itf.curves, noise=itf.noise))
            else:
                cfg = cfg.with_nonideal(None)
        return cfg

    def matmul(self, x2d, W2d, ctx: Context, layer_id):
        """Returns (z_tilde, saved dict). x2d: (rows, n_in), W2d: (n_out, n_in)."""
        saved = {"x": x2d}
        if self.b_a is not None:
            qx = quantize_activation(x2d, self.b_a)
            saved["a_mask"] = activation_ste_mask(x2d)
        else:
            qx = QTensor(x2d, math.inf, "unbounded")
            saved["a_mask"] = None
        if self.b_w is not None:
            qW, s = quantize_weight(W2d, self.b_w, self.fan_out)
        else:
            qW, s = QTensor(W2d, math.inf, "unbounded"), 1.0
        saved["s"] = s

        cfg = self.effective_cfg(ctx)
        if cfg is None or not cfg.finite and cfg.nonideal is None:
            # digital path (also covers infinite-resolution analog)
            z = qx.data @ qW.data.T
            saved["res"] = MacGroupResult(z, z, None, qW.data, qx.data)
            xi = 1.0
            rho = 1.0
        else:
            acodes = _pad_columns(qx.codes, self.n_in, self.n_pad)
            wcodes = _pad_columns(qW.codes, self.n_in, self.n_pad)
            qx_p = QTensor(acodes / qx.levels, qx.bits, qx.range, acodes)
            qW_p = QTensor(wcodes / qW.levels, qW.bits, qW.range, wcodes)
            rng = None
            if cfg.nonideal is not None and cfg.nonideal.noise is not None:
                rng = cfg.nonideal.noise.stream(layer_id, ctx.batch_index)
            need_exact = ctx.compute_exact and ctx.training
            res = pim_linear(qW_p, qx_p, cfg, rng=rng,
                             compute_exact=need_exact,
                             n_threads=ctx.n_threads)
            # un-padded operands for the bilinear backward
            res.weights = qW.data
            res.acts = qx.data
            z = res.value_pim
            saved["res"] = res
            xi = rho = 1.0
            if need_exact:
                # per-output-channel centered variances: BN recenters each
                # channel, so this is the scale that enters gradient flow
                ve = float(res.value_exact.var(axis=0).mean())
                vp = float(res.value_pim.var(axis=0).mean())
                if ve > 0.0 and vp > 0.0:
                    xi = rho = math.sqrt(vp / ve)
        saved["xi"] = xi if self.rescale_backward else 1.0
        self.last_xi = saved["xi"]
        self.last_rho = rho
        return s * z, saved

    def backward(self, grad_z, saved):
        """grad wrt (x2d, W2d); grad_z already includes eta scaling."""
        g = grad_z * saved["s"]
        grad_W, grad_x = gste_backward(g, saved["res"], saved["xi"])
        if saved["a_mask"] is not None:
            grad_x = grad_x * saved["a_mask"]
        return grad_x, grad_W


class BatchNorm(Layer):
    """Per-channel batch normalization with exact backward.

    Channel axis is 1 for 4-d inputs, the last axis for 2-d inputs.
    Calibration mode accumulates plain batch-statistic averages which
    replace the running statistics on commit.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5,
                 gamma_init=1.0, beta_init=0.0):
        self.gamma = Param("gamma", np.full(channels, float(gamma_init)),
                           decay=False)
        self.beta = Param("beta", np.full(channels, float(beta_init)),
                          decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.batch_size_last = 0
        self._calib = None
        self._ctx = None

    def params(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return {"gamma": self.gamma.value, "beta": self.beta.value,
                "running_mean": self.running_mean,
                "running_var": self.running_var}

    def load_state_arrays(self, arrays):
        self.gamma.value[...] = arrays["gamma"]
        self.beta.value[...] = arrays["beta"]
        self.running_mean[...] = arrays["running_mean"]
        self.running_var[...] = arrays["running_var"]

    def calib_reset(self):
        self._calib = {"mean": 0.0, "var": 0.0, "n": 0}

    def calib_commit(self):
        c = self._calib
        if not c or c["n"] == 0:
            raise RuntimeError("no calibration batches accumulated")
        self.running_mean = c["mean"] / c["n"]
        self.running_var = c["var"] / c["n"]
        self._calib = None

    @staticmethod
    def _axes(x):
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        if x.ndim == 2:
            return (0,), (1, -1)
        raise ValueError(f"unsupported input rank {x.ndim}")

    def forward(self, x, ctx: Context):
        axes, bshape = self._axes(x)
        if ctx.batch_stats:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            if ctx.mode == "train":
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu
                self.running_var = (1 - m) * self.running_var + m * var
            elif self._calib is not None:
                self._calib["mean"] = self._calib["mean"] + mu
                self._calib["var"] = self._calib["var"] + var
                self._calib["n"] += 1
        else:
            mu = self.running_mean
            var = self.running_var
        self.batch_size_last = x.shape[0]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(bshape)) * inv.reshape(bshape)
        y = self.gamma.value.reshape(bshape) * xhat + self.beta.value.reshape(bshape)
        self._ctx = {"xhat": xhat, "inv": inv, "axes": axes, "bshape": bshape,
                     "batch_stats": ctx.batch_stats,
                     "n": x.size // self.gamma.value.size}
        return y

    def backward(self, grad_y):
        c = self._ctx
        axes, bshape = c["axes"], c["bshape"]
        xhat, inv, n = c["xhat"], c["inv"], c["n"]
        self.beta.grad += grad_y.sum(axis=axes)
        self.gamma.grad += (grad_y * xhat).sum(axis=axes)
        gsc = grad_y * self.gamma.value.reshape(bshape)
        if not c["batch_stats"]:
            return gsc * inv.reshape(bshape)
        gmean = gsc.mean(axis=axes).reshape(bshape)
        gdot = (gsc * xhat).mean(axis=axes).reshape(bshape)
        return inv.reshape(bshape) * (gsc - gmean - xhat * gdot)


_ACTIVATIONS = {
    "clipped_relu_01": (
        lambda x: np.clip(x, 0.0, 1.0),
        lambda x: ((x > 0.0) & (x < 1.0)).astype(np.float64),
    ),
    "relu": (
        lambda x: np.maximum(x, 0.0),
        lambda x: (x > 0.0).astype(np.float64),
    ),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


class Activation(Layer):
    def __init__(self, kind):
        if kind not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self._x = None

    def forward(self, x, ctx: Context):
        self._x = x
        return _ACTIVATIONS[self.kind][0](x)

    def backward(self, grad):
        return grad * _ACTIVATIONS[self.kind][1](self._x)


class DenseBlock(Layer):
    """Fully-connected block: quantize -> MAC -> scale -> BN -> activation."""

    def __init__(self, n_in, n_out, *, b_w=4, b_a=4, pim_cfg=None, eta=1.0,
                 activation="clipped_relu_01", bn=True, rescale_backward=True,
                 gamma_init=1.0, beta_init=0.0, rng=None):
        rng = rng or np.random.default_rng(0)
        self.W = Param("W", kaiming_normal(rng, (n_out, n_in), n_in))
        self.core = MacCore(n_in, n_out, n_out, b_w, b_a, pim_cfg,
                            rescale_backward)
        self.eta = float(eta)
        self.bn = BatchNorm(n_out, gamma_init=gamma_init,
                            beta_init=beta_init) if bn else None
        self.act = Activation(activation)
        self._saved = None

    @property
    def last_xi(self):
        return self.core.last_xi

    @property
    def last_rho(self):
        return self.core.last_rho

    def params(self):
        ps = [self.W]
        if self.bn is not None:
            ps += self.bn.params()
        return ps

    def state_arrays(self):
        d = {"W": self.W.value}
        if self.bn is not None:
            d.update({f"bn.{k}": v for k, v in self.bn.state_arrays().items()})
        return d

    def load_state_arrays(self, arrays):
        self.W.value[...] = arrays["W"]
        if self.bn is not None:
            self.bn.load_state_arrays(
                {k[3:]: v for k, v in arrays.items() if k.startswith("bn.")})

    def forward(self, x, ctx: Context):
        z, saved = self.core.matmul(x, self.W.value, ctx, self.layer_id)
        z = self.eta * z
        if ctx.training and not np.all(np.isfinite(z)):
            raise TrainingDiverged(self.layer_id)
        self._saved = saved
        y = self.bn.forward(z, ctx) if self.bn is not None else z
        return self.act.forward(y, ctx)

    def backward(self, grad):
        grad = self.act.backward(grad)
        if self.bn is not None:
            grad = self.bn.backward(grad)
        grad = grad * self.eta
        grad_x, grad_W = self.core.backward(grad, self._saved)
        self.W.grad += grad_W
        return grad_x


class ConvBlock(Layer):
    """3x3-style conv block over the same grouped-MAC path (im2col)."""

    def __init__(self, c_in, c_out, kh=3, kw=3, *, stride=1, pad=1, b_w=4,
                 b_a=4, pim_cfg=None, eta=1.0, activation="clipped_relu_01",
                 bn=True, rescale_backward=True, rng=None):
        rng = rng or np.random.default_rng(0)
        n_in = c_in * kh * kw
        self.W = Param("W", kaiming_normal(rng, (c_out, c_in, kh, kw), n_in))
        self.core = MacCore(n_in, c_out, c_out * kh * kw, b_w, b_a, pim_cfg,
                            rescale_backward)
        self.kh, self.kw, self.stride, self.pad = kh, kw, stride, pad
        self.eta = float(eta)
        self.bn = BatchNorm(c_out) if bn else None
        self.act = Activation(activation)
        self._saved = None

    @property
    def last_xi(self):
        return self.core.last_xi

    @property
    def last_rho(self):
        return self.core.last_rho

    def params(self):
        ps = [self.W]
        if self.bn is not None:
            ps += self.bn.params()
        return ps

    def state_arrays(self):
        d = {"W": self.W.value}
        if self.bn is not None:
            d.update({f"bn.{k}": v for k, v in self.bn.state_arrays().items()})
        return d

    def load_state_arrays(self, arrays):
        self.W.value[...] = arrays["W"]
        if self.bn is not None:
            self.bn.load_state_arrays(
                {k[3:]: v for k, v in arrays.items() if k.startswith("bn.")})

    def forward(self, x, ctx: Context):
        B = x.shape[0]
        cols, Ho, Wo = im2col(x, self.kh, self.kw, self.stride, self.pad)
        W2d = self.W.value.reshape(self.W.value.shape[0], -1)
        z2d, saved = self.core.matmul(cols, W2d, ctx, self.layer_id)
        saved["x_shape"] = x.shape
        saved["HoWo"] = (Ho, Wo)
        z = self.eta * z2d.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2)
        if ctx.training and not np.all(np.isfinite(z)):
            raise TrainingDiverged(self.layer_id)
        self._saved = saved
        y = self.bn.forward(z, ctx) if self.bn is not None else z
        return self.act.forward(y, ctx)

    def backward(self, grad):
        grad = self.act.backward(grad)
        if self.bn is not None:
            grad = self.bn.backward(grad)
        grad = grad * self.eta
        B = grad.shape[0]
        Ho, Wo = self._saved["HoWo"]
        g2d = grad.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, -1)
        grad_cols, grad_W = self.core.backward(g2d, self._saved)
        self.W.grad += grad_W.reshape(self.W.value.shape)
        return col2im(grad_cols, self._saved["x_shape"], self.kh, self.kw,
                      self.stride, self.pad, Ho, Wo)


class Dense(Layer):
    """Plain digital dense layer (classifier head): quantized weights and
    inputs, exact MAC, full-precision bias, no BN."""

    def __init__(self, n_in, n_out, *, b_w=4, b_a=4, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.W = Param("W", kaiming_normal(rng, (n_out, n_in), n_in))
        self.b = Param("b", np.zeros(n_out), decay=False) if bias else None
        self.core = MacCore(n_in, n_out, n_out, b_w, b_a, None)
        self._saved = None

    def params(self):
        return [self.W] + ([self.b] if self.b is not None else [])

    def forward(self, x, ctx: Context):
        z, saved = self.core.matmul(x, self.W.value, ctx, self.layer_id)
        self._saved = saved
        return z + self.b.value if self.b is not None else z

    def backward(self, grad):
        if self.b is not None:
            self.b.grad += grad.sum(axis=0)
        grad_x, grad_W = self.core.backward(grad, self._saved)
        self.W.grad += grad_W
        return grad_x


class AvgPool2d(Layer):
    def __init__(self, k=2):
        self.k = k
        self._shape = None

    def forward(self, x, ctx: Context):
        B, C, H, W = x.shape
        k = self.k
        if H % k or W % k:
            raise ValueError(f"pool size {k} does not divide {(H, W)}")
        self._shape = x.shape
        return x.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(self, grad):
        k = self.k
        g = np.repeat(np.repeat(grad, k, axis=2), k, axis=3)
        return g / (k * k)


class GlobalAvgPool(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, ctx: Context):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        B, C, H, W = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (H * W),
                               self._shape).copy()


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, ctx: Context):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential:
    """Layer pipeline with explicit reverse-mode backward."""

    def __init__(self, layers, spec=None):
        self.layers = list(layers)
        self.spec = spec or {}
        for i, l in enumerate(self.layers):
            l.layer_id = i

    def params(self):
        out = []
        for l in self.layers:
            out.extend(l.params())
        return out

    def forward(self, x, ctx: Context):
        for l in self.layers:
            x = l.forward(x, ctx)
        return x

    def backward(self, grad):
        for l in reversed(self.layers):
            grad = l.backward(grad)
        return grad

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def pim_blocks(self):
        return [l for l in self.layers
                if isinstance(l, (DenseBlock, ConvBlock))
                and l.core.pim_cfg is not None]

    def bn_layers(self):
        out = []
        for l in self.layers:
            if isinstance(l, BatchNorm):
                out.append(l)
            elif getattr(l, "bn", None) is not None:
                out.append(l.bn)
        return out

    def state_arrays(self):
        d = {}
        for i, l in enumerate(self.layers):
            for k, v in l.state_arrays().items():
                d[f"layer{i}.{k}"] = v
        return d

    def load_state_arrays(self, arrays):
        for i, l in enumerate(self.layers):
            prefix = f"layer{i}."
            sub = {k[len(prefix):]: v for k, v in arrays.items()
                   if k.startswith(prefix)}
            if sub:
                l.load_state_arrays(sub)


def softmax_cross_entropy(logits, labels):
    """Returns (mean loss, grad wrt logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean()
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def save_checkpoint(path, model: Sequential, extra=None):
    meta = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "model_spec": model.spec,
        "extra": extra or {},
    }
    arrays = model.state_arrays()
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
            **arrays)


def load_checkpoint(path):
    """Returns (meta dict, arrays dict); model rebuild lives with the builders."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {meta.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, arrays
