"""The finite-difference suite: every differentiable primitive plus the toy model end to end."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import toy_model_config
from .gradcheck import GradcheckResult, gradcheck
from .losses import total_loss
from .tensor import Tensor

TOL = 1e-4


@dataclass
class SuiteEntry:
    name: str
    result: GradcheckResult
    seconds: float

    def passed(self, tol=TOL):
        return self.result.passed(tol)

    def line(self, tol=TOL):
        r = self.result
        status = "PASS" if self.passed(tol) else "FAIL"
        return (f"{status} {self.name:<22} max_rel={r.max_rel_error:.2e} checked={r.checked} "
                f"kinks_skipped={r.skipped_kinks} exempt={r.exempt} {self.seconds:.2f}s")


def _r(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _primitive_cases(rng):
    mha = nn.MultiHeadAttention(8, 2, rng)
    box = np.array([0.1, 0.2, 0.7, 0.9])
    return [
        ("add/broadcast", lambda a, b: a + b, [_r(rng, 3, 4), _r(rng, 4)], ()),
        ("sub", lambda a, b: a - b, [_r(rng, 3, 4), _r(rng, 3, 4)], ()),
        ("mul", lambda a, b: a * b, [_r(rng, 3, 4), _r(rng, 3, 4)], ()),
        ("square", T.square, [_r(rng, 3, 4)], ()),
        ("sqrt", lambda a: T.sqrt(T.square(a) + 1.0), [_r(rng, 3, 4)], ()),
        ("exp", T.exp, [_r(rng, 3, 4)], ()),
        ("relu", T.relu, [_r(rng, 3, 4)], ()),
        ("leaky_relu", T.leaky_relu, [_r(rng, 3, 4)], ()),
        ("sum/mean", lambda a: a.sum(axis=1) + a.mean(), [_r(rng, 3, 4)], ()),
        ("reshape/transpose", lambda a: a.reshape(4, 3).transpose(1, 0), [_r(rng, 3, 4)], ()),
        ("getitem/concat", lambda a, b: T.concat([a[1:], b], axis=0), [_r(rng, 3, 4), _r(rng, 2, 4)], ()),
        ("stack", lambda a, b: T.stack([a, b], axis=1), [_r(rng, 3, 4), _r(rng, 3, 4)], ()),
        ("matmul", T.matmul, [_r(rng, 2, 3, 4), _r(rng, 4, 5)], ()),
        ("softmax", T.softmax_lastdim, [_r(rng, 3, 6)], ()),
        ("layer_norm", T.layer_norm, [_r(rng, 4, 6), _r(rng, 6), _r(rng, 6)], ()),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, 2, 1), [_r(rng, 2, 5, 6, 2), _r(rng, 3, 3, 2, 3), _r(rng, 3)], ()),
        ("depthwise_correlate", T.depthwise_correlate, [_r(rng, 5, 6, 3), _r(rng, 2, 3, 3, 3)], ()),
        ("max_over_set", lambda a, b, c: T.max_over_set([a, b, c]), [_r(rng, 3, 4, 2) for _ in range(3)], ()),
        ("bilinear_resize", lambda x: T.bilinear_resize(x, 7, 5), [_r(rng, 2, 3, 4, 2)], ()),
        ("roi_pool", lambda f: T.roi_pool(f, box, 3), [_r(rng, 6, 6, 2)], ()),
        ("multi_head_attention", lambda q, k, v: mha(q, k, v, k_pos=Tensor(np.ones((5, 8)))),
         [_r(rng, 3, 8), _r(rng, 5, 8), _r(rng, 5, 8)], mha.parameters()),
    ]


def toy_case(seed=0, per_tensor=4):
    """End-to-end toy model: H_IN=32, h=4, d=16, s=3, L=2, two exemplars."""
    from .model import LowShotCounter

    rng = np.random.default_rng(seed)
    model = LowShotCounter(toy_model_config(), seed)
    model.eval()
    image = Tensor(rng.random((1, 32, 32, 3)))
    boxes = [np.array([[0.1, 0.1, 0.4, 0.35], [0.5, 0.55, 0.8, 0.9]])]
    gt = rng.random((1, 32, 32)) * 0.01

    def fn(img):
        final, aux, _ = model.forward(img, boxes, aux=True)
        loss, _, _ = total_loss(final, aux, gt, 2, 0.3)
        return loss

    return fn, [image], model.parameters(), per_tensor


def run_suite(seed=0, include_model=True, per_tensor=4):
    rng = np.random.default_rng(seed)
    entries = []
    for name, fn, inputs, extra in _primitive_cases(rng):
        t0 = time.perf_counter()
        res = gradcheck(fn, inputs, extra=extra, seed=seed)
        entries.append(SuiteEntry(name, res, time.perf_counter() - t0))
    if include_model:
        fn, inputs, params, k = toy_case(seed, per_tensor)
        t0 = time.perf_counter()
        res = gradcheck(fn, inputs, extra=params, max_per_input=k, seed=seed)
        entries.append(SuiteEntry("toy_model_end_to_end", res, time.perf_counter() - t0))
    return entries
