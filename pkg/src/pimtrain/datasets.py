"""Dataset ingestion: CIFAR-10 binary files and seeded synthetic generators.

All selection (subsets, shuffles, generator draws) is seeded so any split
is byte-reproducible. Images travel as floats in [0, 1] equal to 8-bit
code / 255; the stem layer's 8-bit quantizer reproduces the codes exactly,
so no normalization is applied anywhere.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels

CIFAR10_HELP = (
    "CIFAR-10 binary files not found. Download cifar-10-binary.tar.gz from "
    "the dataset distribution site, extract it, and point dataset.path at "
    "the directory holding data_batch_*.bin and test_batch.bin "
    "(no network access is attempted by this tool)."
)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str                      # cifar10_binary | synthetic_blobs | synthetic_moons
    path: str = ""
    train_size: int = 0            # 0: all
    test_size: int = 0
    classes: int = 10
    shape: tuple = (3, 32, 32)     # synthetic image/feature shape
    noise: float = 0.18            # synthetic difficulty knobs
    jitter: float = 0.16
    separation: float = 2.0
    seed: int = 0
    augment: bool = False


def _read_cifar_file(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise ValueError(f"{path}: size {raw.size} is not a whole number of "
                         f"{CIFAR_RECORD}-byte records")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def balanced_subset(labels, size, classes, rng):
    """Deterministic class-balanced index selection."""
    if size <= 0 or size >= labels.shape[0]:
        return np.arange(labels.shape[0])
    per = size // classes
    picks = []
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        perm = rng.permutation(idx.size)
        picks.append(idx[perm[:per]])
    sel = np.sort(np.concatenate(picks))
    return sel


def load_cifar10(spec: DatasetSpec):
    """Images as 8-bit codes scaled to [0, 1], labels 0..9."""
    root = spec.path
    train_paths = [os.path.join(root, f) for f in CIFAR_TRAIN_FILES]
    test_path = os.path.join(root, CIFAR_TEST_FILE)
    if not all(os.path.exists(p) for p in train_paths + [test_path]):
        raise FileNotFoundError(CIFAR10_HELP)
    xs, ys = [], []
    for p in train_paths:
        x, y = _read_cifar_file(p)
        xs.append(x)
        ys.append(y)
    x_tr = np.concatenate(xs)
    y_tr = np.concatenate(ys)
    x_te, y_te = _read_cifar_file(test_path)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(30,)))
    tr_sel = balanced_subset(y_tr, spec.train_size, 10, rng)
    te_sel = balanced_subset(y_te, spec.test_size, 10, rng)
    return (x_tr[tr_sel].astype(np.float64) / 255.0, y_tr[tr_sel],
            x_te[te_sel].astype(np.float64) / 255.0, y_te[te_sel])


def _smooth_field(rng, shape, res=4):
    """Low-frequency random field in [-1, 1]-ish via bilinear upsampling."""
    C, H, W = shape
    coarse = rng.standard_normal((C, res, res))
    yi = np.linspace(0, res - 1, H)
    xi = np.linspace(0, res - 1, W)
    y0 = np.floor(yi).astype(int).clip(0, res - 2)
    x0 = np.floor(xi).astype(int).clip(0, res - 2)
    ty = (yi - y0)[None, :, None]
    tx = (xi - x0)[None, None, :]
    a = coarse[:, y0][:, :, x0]
    b = coarse[:, y0][:, :, x0 + 1]
    c = coarse[:, y0 + 1][:, :, x0]
    d = coarse[:, y0 + 1][:, :, x0 + 1]
    return (a * (1 - ty) * (1 - tx) + b * (1 - ty) * tx
            + c * ty * (1 - tx) + d * ty * tx)


def synthetic_blobs(spec: DatasetSpec):
    """Class-prototype data: smooth image prototypes (image shapes) or
    separated Gaussian clusters (flat shapes), 8-bit quantized images."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(31,)))
    n_tr = spec.train_size or 1000
    n_te = spec.test_size or max(200, n_tr // 5)
    k = spec.classes
    if len(spec.shape) == 1:
        d = spec.shape[0]
        means = rng.standard_normal((k, d))
        means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)
        def make(n, sub):
            y = np.arange(n) % k
            sub.shuffle(y)
            x = means[y] + sub.standard_normal((n, d)) * spec.noise
            return x, y
    else:
        protos = np.stack([
            0.5 + 0.22 * _smooth_field(rng, spec.shape, res=4)
            for _ in range(k)
        ])
        def make(n, sub):
            y = np.arange(n) % k
            sub.shuffle(y)
            x = protos[y]
            # instance-specific smooth deformation plus pixel noise
            defo = np.stack([
                _smooth_field(sub, spec.shape, res=4) for _ in range(n)])
            x = x + spec.jitter * defo
            x = x + sub.standard_normal(x.shape) * spec.noise
            x = x + sub.uniform(-0.08, 0.08, (n, 1, 1, 1))  # brightness
            codes = np.floor(np.clip(x, 0, 1) * 255 + 0.5)
            return codes / 255.0, y
    x_tr, y_tr = make(n_tr, np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(32,))))
    x_te, y_te = make(n_te, np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(33,))))
    return x_tr, y_tr, x_te, y_te


def synthetic_moons(spec: DatasetSpec):
    """Two interleaved half circles in 2-d."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(34,)))
    def make(n, sub):
        half = n // 2
        t = sub.uniform(0, np.pi, half)
        x0 = np.stack([np.cos(t), np.sin(t)], axis=1)
        x1 = np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.concatenate([x0, x1]) + sub.standard_normal((2 * half, 2)) * spec.noise
        y = np.concatenate([np.zeros(half, np.int64), np.ones(half, np.int64)])
        perm = sub.permutation(2 * half)
        return x[perm], y[perm]
    n_tr = spec.train_size or 400
    n_te = spec.test_size or 200
    x_tr, y_tr = make(n_tr, rng)
    x_te, y_te = make(n_te, np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(35,))))
    return x_tr, y_tr, x_te, y_te


LOADERS = {
    "cifar10_binary": load_cifar10,
    "synthetic_blobs": synthetic_blobs,
    "synthetic_moons": synthetic_moons,
}


def load_dataset(spec: DatasetSpec):
    if spec.kind not in LOADERS:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    return LOADERS[spec.kind](spec)


def augment_images(x, rng, pad=4):
    """Pad-and-random-crop plus horizontal flip; training-time only."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, (B, 2))
    flips = rng.random(B) < 0.5
    for i in range(B):
        oy, ox = offs[i]
        img = xp[i, :, oy:oy + H, ox:ox + W]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


def make_augment(spec: DatasetSpec):
    if spec.kind == "cifar10_binary" and spec.augment:
        return augment_images
    return None
