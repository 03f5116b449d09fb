"""Central finite-difference verification of analytic gradients.

The check runs in float64 (shadow mode). The function output is reduced to a
scalar with a fixed random projection so every output entry participates.
Coordinates whose perturbation flips a piecewise branch (a ReLU sign or a max
winner) are skipped and counted: the derivative does not exist there.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad, precision, record_kinks


@dataclass
class GradcheckResult:
    max_rel_error: float = 0.0
    checked: int = 0
    skipped_kinks: int = 0
    exempt: int = 0
    worst: tuple = field(default_factory=tuple)

    @property
    def ok(self):
        return self.checked > 0

    def passed(self, tol=1e-4):
        return self.checked > 0 and self.max_rel_error < tol


@contextmanager
def float64_shadow(tensors):
    """Temporarily cast the given tensors (e.g. model parameters) to float64."""
    saved = [t.data for t in tensors]
    for t in tensors:
        t.data = t.data.astype(np.float64)
    try:
        with precision(np.float64):
            yield
    finally:
        for t, d in zip(tensors, saved):
            t.data = d
            t.grad = None


def _scalarize(out, proj):
    return float(np.sum(out.data * proj))


def gradcheck(fn, inputs, eps=1e-3, max_per_input=None, seed=0, extra=()):
    """Compare analytic and central-difference gradients of ``fn(*inputs)``.

    ``inputs`` are perturbed in place. ``extra`` lists further tensors that
    ``fn`` closes over (model parameters) and that should also be checked.
    ``max_per_input`` caps the coordinates sampled per tensor.
    """
    rng = np.random.default_rng(seed)
    targets = list(inputs) + list(extra)
    res = GradcheckResult()
    with float64_shadow(targets):
        for t in targets:
            t.requires_grad = True
            t.grad = None
        out = fn(*inputs)
        proj = rng.standard_normal(out.shape)
        loss = (out * Tensor(proj)).sum()
        loss.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]

        def evaluate():
            with no_grad(), record_kinks() as log:
                val = _scalarize(fn(*inputs), proj)
            return val, tuple(log)

        with no_grad(), record_kinks() as base_log:
            fn(*inputs)
        base = tuple(base_log)

        for ti, t in enumerate(targets):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_input is not None and flat.size > max_per_input:
                idx = rng.choice(flat.size, size=max_per_input, replace=False)
            ga = analytic[ti].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp, kp = evaluate()
                flat[i] = orig - eps
                fm, km = evaluate()
                flat[i] = orig
                if kp != base or km != base:
                    res.skipped_kinks += 1
                    continue
                num = (fp - fm) / (2 * eps)
                a = ga[i]
                denom = abs(a) + abs(num)
                if denom < 1e-8:
                    res.exempt += 1
                    continue
                rel = abs(a - num) / denom
                res.checked += 1
                if rel > res.max_rel_error:
                    res.max_rel_error = rel
                    res.worst = (ti, int(i), float(a), float(num))
    return res
