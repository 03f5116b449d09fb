"""Prototype matching and density regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class ResponseTensor:
    values: Tensor  # (h, w, d)


class DensityMap:
    """A (H, W) density whose count is always recomputed from the values."""

    def __init__(self, values):
        self.values = values if isinstance(values, Tensor) else Tensor(values)
        if self.values.ndim != 2:
            raise ShapeError(f"density map must be 2-D, got {self.values.shape}")

    @property
    def count(self):
        return estimate_count(self)

    @property
    def shape(self):
        return self.values.shape

    def numpy(self):
        return self.values.data


class RegressionHead(nn.Module):
    """Three [3x3 conv, Leaky ReLU, 2x bilinear upsample] blocks, then 1x1 conv + Leaky ReLU."""

    def __init__(self, d, widths, rng, slope=0.01):
        self.convs = []
        cin = d
        for c in widths:
            self.convs.append(nn.Conv2d(cin, c, 3, rng))
            cin = c
        self.out = nn.Conv2d(cin, 1, 1, rng)
        # small output layer: the untrained map should start near zero density
        self.out.weight.data = (rng.uniform(-1, 1, self.out.weight.shape) * 1e-3).astype(np.float32)
        self.out.bias.data = np.zeros(1, np.float32)
        self.slope = slope

    def __call__(self, x):
        for conv in self.convs:
            x = T.leaky_relu(conv(x), self.slope)
            h, w = x.shape[-3:-1]
            x = T.bilinear_resize(x, 2 * h, 2 * w)
        x = T.leaky_relu(self.out(x), self.slope)
        return x.reshape(x.shape[:-1])


def correlate_all(encoded, protos):
    """``f^E * q_i`` for every prototype -> list of ResponseTensor.

    ``encoded``: EncodedImage or (h, w, d) tensor; ``protos``: PrototypeSet
    (unbatched) or (n, s, s, d) tensor.
    """
    f = encoded.features if hasattr(encoded, "features") else encoded
    k = protos.prototypes if hasattr(protos, "prototypes") else protos
    if k.shape[-1] != f.shape[-1]:
        raise ShapeError(f"prototype channels {k.shape[-1]} vs feature channels {f.shape[-1]}")
    stacked = T.depthwise_correlate(f, k)  # n, h, w, d
    return [ResponseTensor(stacked[i]) for i in range(stacked.shape[0])]


def fuse(responses):
    if not responses:
        raise ShapeError("fuse needs at least one response")
    return ResponseTensor(T.max_over_set([r.values for r in responses]))


def regress_density(fused, head: RegressionHead, input_size=None):
    v = fused.values if isinstance(fused, ResponseTensor) else fused
    if input_size is not None and v.shape[-3] * 8 != input_size:
        raise ShapeError(f"feature size {v.shape[-3]} * 8 != input size {input_size}")
    out = head(v)
    return DensityMap(out) if out.ndim == 2 else out


def estimate_count(dmap, clamp=False):
    v = dmap.values.data if isinstance(dmap, DensityMap) else np.asarray(getattr(dmap, "data", dmap))
    if clamp:
        v = np.maximum(v, 0)
    return float(np.sum(v, dtype=np.float64))


def match_and_fuse(feats, protos):
    """Batched correlate + max: (B, h, w, d) x (B, n, s, s, d) -> (B, h, w, d)."""
    return T.max_over_axis(T.depthwise_correlate(feats, protos), axis=1)
