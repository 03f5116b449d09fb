"""Object-normalised density losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LossReport:
    l_ose: float
    l_aux: float
    total: float
    objects: int
    grad_norm: float = float("nan")


def _check_m(m, gt):
    if m <= 0:
        if np.any(np.asarray(gt) != 0):
            raise ValueError("object count M is 0 but the ground truth is non-zero")
        return 1
    return m


def _sq_err(pred, gt):
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.data.dtype), dtype=pred.data.dtype)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return T.square(pred - gt).sum()


def loss_ose(pred, gt, m):
    """Squared error summed over the batch, divided by the object count ``m``."""
    gt_arr = gt.data if isinstance(gt, Tensor) else gt
    m = _check_m(m, gt_arr)
    return _sq_err(pred, gt) * (1.0 / m)


def loss_aux(intermediate, gt, m, iterations=None):
    """Sum of ``loss_ose`` over the maps decoded from iterations 1..L-1."""
    intermediate = list(intermediate)
    if iterations is not None and len(intermediate) != iterations - 1:
        raise ShapeError(f"expected {iterations - 1} intermediate maps, got {len(intermediate)}")
    gt_arr = gt.data if isinstance(gt, Tensor) else gt
    m = _check_m(m, gt_arr)
    if not intermediate:
        return Tensor(np.zeros((), dtype=T.get_dtype()))
    total = _sq_err(intermediate[0], gt)
    for r in intermediate[1:]:
        total = total + _sq_err(r, gt)
    return total * (1.0 / m)


def total_loss(final, aux_maps, gt, m, aux_weight):
    lo = loss_ose(final, gt, m)
    la = loss_aux(aux_maps, gt, m)
    if aux_weight == 0 or not aux_maps:
        return lo, lo, la
    return lo + la * aux_weight, lo, la
