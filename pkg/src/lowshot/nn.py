"""Parameter containers and layers on top of ``tensor``."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def Parameter(data):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, dtype=np.float32)


class Module:
    """Minimal module: parameters are Tensor attributes, submodules are Module attributes
    (or lists of them). Names are dotted attribute paths."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} vs parameter {p.shape}")
            p.data = arr.astype(np.float32).copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(uniform(rng, (fan_in, fan_out), bound))
        self.bias = Parameter(uniform(rng, (fan_out,), bound)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None):
        fan_in = cin * k * k
        bound = 1.0 / math.sqrt(fan_in)
        # He-style scale on the weights keeps activations alive through ReLU stacks
        self.weight = Parameter(uniform(rng, (k, k, cin, cout), math.sqrt(6.0 / fan_in)))
        self.bias = Parameter(uniform(rng, (cout,), bound))
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        bound = math.sqrt(6.0 / (2 * d))  # xavier uniform
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", Parameter(uniform(rng, (d, d), bound)))
            setattr(self, f"b{name}", Parameter(np.zeros(d)))

    def params(self):
        return {n: getattr(self, n) for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    def __call__(self, q, k, v, q_pos=None, k_pos=None):
        return T.multi_head_attention(q, k, v, self.params(), self.heads, k_pos=k_pos, q_pos=q_pos)


class FeedForward(Module):
    def __init__(self, d, hidden, rng, dropout=0.0):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.p = dropout

    def __call__(self, x, rng=None):
        h = T.relu(self.fc1(x))
        h = T.dropout(h, self.p, self.training and rng is not None, rng)
        return self.fc2(h)
