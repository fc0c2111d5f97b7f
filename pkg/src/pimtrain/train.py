"""Training loop, BN calibration, evaluation, adjusted-precision search.

Training models the ideal analog quantization only: curves and noise are
not injected during optimization (chips differ; fitting to one chip's
imperfections biases the model). The gap to the deployed interface is
closed afterwards by calibrating BN running statistics under exactly the
interface used for inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .nn import Context, EvalInterface, Sequential, TrainingDiverged, \
    softmax_cross_entropy


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr0: float = 0.1
    lr_milestones: tuple = (15, 23)
    lr_decay: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    seed: int = 0
    eval_every: int = 0          # 0: only final evaluation
    n_threads: int = 0

    def __post_init__(self):
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must be in [0, 1)")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        ms = list(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr_milestones must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        k = sum(epoch >= m for m in self.lr_milestones)
        return self.lr0 * self.lr_decay ** k


@dataclass
class CalibSpec:
    num_batches: int = 20
    batch_size: int = 128
    seed: int = 0
    apply_nonideal: bool = True

    def __post_init__(self):
        if self.num_batches < 1:
            raise ValueError("num_batches must be >= 1")


class SGD:
    """SGD with weight decay and (Nesterov) momentum.

    Update per parameter: g = grad + wd*w; v = mu*v + g;
    step direction g + mu*v under Nesterov, else v.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0,
                 nesterov=True):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self._buf = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        mu = self.momentum
        for p, buf in zip(self.params, self._buf):
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.value
            buf *= mu
            buf += g
            d = g + mu * buf if self.nesterov else buf
            p.value -= self.lr * d


def _accuracy_from_logits(logits, labels) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def _iter_batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def train(model: Sequential, data, cfg: TrainConfig, augment=None,
          interface_for_eval: Optional[EvalInterface] = None,
          progress: Optional[Callable] = None):
    """Optimize model on data = (x_train, y_train, x_test, y_test).

    Deterministic given (model init, cfg.seed): batch order, augmentation
    draws, everything else is seeded. Returns a per-epoch record dict;
    divergence terminates the run and is reported, not raised.
    """
    x_tr, y_tr, x_te, y_te = data
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(10,)))
    opt = SGD(model.params(), cfg.lr0, cfg.momentum, cfg.weight_decay,
              cfg.nesterov)
    record = {"epochs": [], "diverged_epoch": None,
              "final_train_acc": None, "final_eval_acc": None}
    n = x_tr.shape[0]
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        hits = 0
        seen = 0
        try:
            for bi, sel in enumerate(_iter_batches(n, cfg.batch_size, order)):
                xb = x_tr[sel]
                if augment is not None:
                    xb = augment(xb, rng)
                ctx = Context(mode="train", batch_index=bi,
                              n_threads=cfg.n_threads)
                logits = model.forward(xb, ctx)
                loss, grad = softmax_cross_entropy(logits, y_tr[sel])
                if not math.isfinite(loss):
                    raise TrainingDiverged(-1, "non-finite loss")
                model.zero_grad()
                model.backward(grad)
                opt.step()
                losses.append(loss)
                hits += int((logits.argmax(axis=1) == y_tr[sel]).sum())
                seen += sel.size
        except TrainingDiverged as e:
            record["diverged_epoch"] = epoch
            record["diverged_layer"] = e.layer_id
            break
        ep = {"epoch": epoch, "lr": opt.lr,
              "train_loss": float(np.mean(losses)),
              "train_acc": hits / seen}
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            ep["eval_acc"] = evaluate(model, (x_te, y_te),
                                      interface_for_eval,
                                      batch_size=cfg.batch_size,
                                      n_threads=cfg.n_threads)
        record["epochs"].append(ep)
        if progress is not None:
            progress(ep)
    if record["epochs"]:
        record["final_train_acc"] = record["epochs"][-1]["train_acc"]
    if record["diverged_epoch"] is None:
        record["final_eval_acc"] = evaluate(
            model, (x_te, y_te), interface_for_eval,
            batch_size=cfg.batch_size, n_threads=cfg.n_threads)
    return record


def evaluate(model: Sequential, data, interface: Optional[EvalInterface] = None,
             batch_size: int = 256, n_threads: int = 0) -> float:
    """Top-1 accuracy under the given interface; deterministic given the
    interface's noise seed (streams derive from layer and batch indices)."""
    x, y = data
    hits = 0
    for bi, sel in enumerate(_iter_batches(x.shape[0], batch_size)):
        ctx = Context(mode="eval", interface=interface, batch_index=bi,
                      compute_exact=False, n_threads=n_threads)
        logits = model.forward(x[sel], ctx)
        hits += int((logits.argmax(axis=1) == y[sel]).sum())
    return hits / x.shape[0]


def bn_calibrate(model: Sequential, data, spec: CalibSpec,
                 interface: Optional[EvalInterface], n_threads: int = 0):
    """Refresh BN running statistics under the evaluation interface.

    Aggregates plain (momentum-free) averages of batch statistics over
    spec.num_batches seeded batches. Weights and BN affine parameters are
    untouched. The interface must be the one used at evaluation time.
    """
    x, y = data[0], data[1]
    if x.shape[0] == 0:
        raise ValueError("empty calibration data")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(20,)))
    order = rng.permutation(x.shape[0])
    bns = model.bn_layers()
    for bn in bns:
        bn.calib_reset()
    itf = interface if spec.apply_nonideal else None
    done = 0
    for bi in range(spec.num_batches):
        sel = order[bi * spec.batch_size:(bi + 1) * spec.batch_size]
        if sel.size == 0:
            break
        ctx = Context(mode="calib", interface=itf, batch_index=bi,
                      compute_exact=False, n_threads=n_threads)
        model.forward(x[sel], ctx)
        done += 1
    if done == 0:
        raise ValueError("calibration data smaller than one batch")
    for bn in bns:
        bn.calib_commit()
    return model


def adjusted_precision_search(model_family: Callable, b_infer, sigma: float,
                              candidates, evaluate_fn: Callable):
    """Pick the training resolution that evaluates best at (b_infer, sigma).

    model_family(b_train) returns a trained model (or raises; failures are
    recorded and the search continues). evaluate_fn(model, b_infer, sigma)
    returns accuracy after BN calibration under the target interface. Ties
    break toward the larger training resolution.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("no candidate resolutions")
    if any(c > b_infer for c in cands):
        raise ValueError("candidates must not exceed the inference resolution")
    grid = []
    for b_train in cands:
        row = {"b_train": b_train, "b_infer": b_infer, "sigma": sigma,
               "accuracy": None, "error": None}
        try:
            model = model_family(b_train)
            row["accuracy"] = evaluate_fn(model, b_infer, sigma)
        except Exception as e:  # keep sweeping; record the failure
            row["error"] = f"{type(e).__name__}: {e}"
        grid.append(row)
    scored = [r for r in grid if r["accuracy"] is not None]
    if not scored:
        raise RuntimeError("every candidate run failed")
    best = max(scored, key=lambda r: (r["accuracy"], r["b_train"]))
    return best["b_train"], grid
