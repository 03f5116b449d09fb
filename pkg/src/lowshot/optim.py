"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np


def global_grad_norm(params):
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(sq)


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad.astype(np.float64) * scale).astype(p.grad.dtype)
    return norm


class AdamW:
    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(named_params)  # [(name, tensor)]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data *= np.float32(1.0 - self.lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state(self):
        tensors = {}
        for n in self.m:
            tensors[f"optim.m.{n}"] = self.m[n]
            tensors[f"optim.v.{n}"] = self.v[n]
        return tensors, {"step_count": self.step_count}

    def load_state(self, tensors, meta):
        for n in self.m:
            self.m[n] = np.asarray(tensors[f"optim.m.{n}"], dtype=np.float32).copy()
            self.v[n] = np.asarray(tensors[f"optim.v.{n}"], dtype=np.float32).copy()
        self.step_count = int(meta["step_count"])
