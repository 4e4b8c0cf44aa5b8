"""Class weighting, Nadam, exponential LR decay and early-stopped training."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from . import unet
from .inference import mc_sample


class DegenerateDatasetError(ValueError):
    """A class required by the weighting rule is absent."""


class DivergenceError(FloatingPointError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    lr_decay: float = 0.9996
    l2: float = 1e-6
    batch: int = 256
    max_epochs: int = 1000
    patience: int = 200
    weight_mode: str = "UW"
    n_val_samples: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.weight_mode not in ("UW", "MFW"):
            raise ValueError(f"weight_mode must be UW or MFW, got {self.weight_mode!r}")
        if self.batch < 1 or self.n_val_samples < 1 or self.max_epochs < 1:
            raise ValueError("batch, n_val_samples and max_epochs must be >= 1")


def class_counts(labels):
    labels = np.asarray(labels)
    n_d = int(labels.sum())
    return labels.size - n_d, n_d


def median_frequency_weights(n_nd, n_d):
    """Exact MFW pair ``median(f)/f_c`` from node counts, as fractions."""
    if n_nd == 0 or n_d == 0:
        raise DegenerateDatasetError("median-frequency weighting needs both classes present")
    total = n_nd + n_d
    f = [Fraction(n_nd, total), Fraction(n_d, total)]
    med = (f[0] + f[1]) / 2
    return med / f[0], med / f[1]


def class_weights(labels, mode):
    """``(w_ND, w_D)`` for uniform (UW) or median-frequency (MFW) weighting."""
    if mode == "UW":
        return (1.0, 1.0)
    if mode != "MFW":
        raise ValueError(f"unknown weight mode {mode!r}")
    w_nd, w_d = median_frequency_weights(*class_counts(labels))
    return (float(w_nd), float(w_d))


def l2_penalty(params, l2):
    return l2 * sum(float((v * v).sum()) for k, v in params.items() if unet.is_kernel(k))


def total_loss(model, x, y, weights, l2, dropout_active=False, bn_mode="infer", rng=None):
    """Mean weighted cross-entropy over the batch plus the L2 kernel penalty."""
    probs = unet.forward(model, x, dropout_active, bn_mode, rng)
    return T.weighted_ce(probs, y, weights) + l2_penalty(model.params, l2)


def lr_at(epoch, lr0=1e-4, decay=0.9996):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay ** epoch


class Nadam:
    """Nesterov-accelerated Adam with bias-corrected moments."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-7):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            num = b1 * (m / c1) + (1 - b1) * g / c1
            params[k] -= lr * num / (np.sqrt(v / c2) + self.eps)
        return params


def nadam_step(params, grads, state: Nadam, lr):
    return state.step(params, grads, lr)


def bayes_val_loss(model, x, y, weights, n_val_samples, seed, obs_ids=None):
    """Expected weighted CE over ``n_val_samples`` MC-dropout passes (no L2)."""
    if n_val_samples < 1:
        raise ValueError("n_val_samples must be >= 1")
    samples = mc_sample(model, x, n_val_samples, seed, obs_ids=obs_ids)
    return float(np.mean([T.weighted_ce(s, y, weights) for s in samples]))


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_model: unet.UNetModel = None
    weights: tuple = (1.0, 1.0)
    priors: tuple = (0.5, 0.5)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.lr):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def train(model: unet.UNetModel, dataset, cfg: TrainConfig, log=None):
    """Train ``model`` in place on the dataset's train split, early-stopping on val.

    Mini-batches run with dropout active and batch norm in train mode. After
    every epoch the Bayesian validation loss is computed with a fixed seed,
    so epochs are compared under common random numbers. The model is left
    holding the best epoch's parameters, which are also in the history.
    """
    tr = dataset.subset("train")
    va = dataset.subset("val")
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("train and val splits must both be non-empty")
    weights = class_weights(tr.labels, cfg.weight_mode)
    f_nd, f_d = tr.class_frequencies()
    hist = TrainHistory(weights=weights, priors=(f_nd, f_d))
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Nadam(cfg.beta1, cfg.beta2, cfg.eps)
    xtr = tr.features.astype(np.float64)
    ytr = tr.labels
    xva = va.features.astype(np.float64)
    model.seeds = list(model.seeds) + [int(cfg.seed)]
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg.lr0, cfg.lr_decay)
        perm = rng.permutation(len(tr))
        loss_sum = 0.0
        for b, start in enumerate(range(0, len(tr), cfg.batch)):
            idx = perm[start:start + cfg.batch]
            probs, tape = unet.forward(model, xtr[idx], True, "train", rng, return_tape=True)
            ce = T.weighted_ce(probs, ytr[idx], weights)
            loss = ce + l2_penalty(model.params, cfg.l2)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            grads = unet.backward(model, tape, T.weighted_ce_backward(probs, ytr[idx], weights))
            for k in grads:
                if unet.is_kernel(k):
                    grads[k] = grads[k] + 2.0 * cfg.l2 * model.params[k]
            opt.step(model.params, grads, lr)
            model.bn_state.update(tape["bn_state"])
            loss_sum += loss * len(idx)
        model.epoch = epoch
        val = bayes_val_loss(model, xva, va.labels, weights, cfg.n_val_samples, cfg.seed, va.indices)
        if not np.isfinite(val):
            raise DivergenceError(epoch, -1, val)
        hist.epochs.append(epoch)
        hist.train_loss.append(loss_sum / len(tr))
        hist.val_loss.append(val)
        hist.lr.append(lr)
        if val < hist.best_val_loss - 1e-9:
            hist.best_val_loss = val
            hist.best_epoch = epoch
            hist.best_model = model.copy()
        if log:
            log(f"epoch {epoch:4d}  train {hist.train_loss[-1]:.5f}  val {val:.5f}  lr {lr:.3e}")
        if epoch - hist.best_epoch > cfg.patience:
            break
    best = hist.best_model
    model.params = {k: v.copy() for k, v in best.params.items()}
    model.bn_state = {k: s.copy() for k, s in best.bn_state.items()}
    model.epoch = best.epoch
    return hist
