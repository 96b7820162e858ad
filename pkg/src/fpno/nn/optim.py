"""Relative MSE loss, AdamW and patience-based early stopping."""

from __future__ import annotations

import math

import numpy as np

from ..exceptions import DimensionError, OptStepError


def rel_mse_loss(pred, ref, eps=1e-4, return_grad=False):
    """Mean over all entries of ``(pred - ref)^2 / (ref^2 + eps)``."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise DimensionError(f"prediction {pred.shape} vs reference {ref.shape}")
    diff = pred - ref
    weight = 1.0 / (ref * ref + eps)
    loss = float(np.mean(diff * diff * weight))
    if not return_grad:
        return loss
    return loss, 2.0 * diff * weight / diff.size


def relative_l2(pred, ref):
    """Per-row ``|pred - ref|_2 / |ref|_2``."""
    num = np.linalg.norm(np.atleast_2d(pred) - np.atleast_2d(ref), axis=1)
    den = np.linalg.norm(np.atleast_2d(ref), axis=1)
    return num / np.where(den > 0, den, 1.0)


class AdamW:
    """Adam with decoupled weight decay (decay acts on the parameters directly)."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise DimensionError("gradient list does not match parameters")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise OptStepError("non-finite gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise DimensionError(f"gradient shape {g.shape} vs parameter {p.shape}")
            p *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopping:
    """Signals a stop once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience=1000):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, value):
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience
