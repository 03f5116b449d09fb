"""Reverse-mode differentiable tensors backed by numpy.

Every op builds its output eagerly and attaches a closure mapping the output
gradient to input gradients. ``Tape`` orders the recorded ops of a graph by
creation sequence, which is a valid topological order, and ``backward`` runs
the closures in reverse.

Compute is float32. ``precision(np.float64)`` switches newly created tensors
to float64; the gradient checker uses it as a shadow mode.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from . import kernels

_state = {"dtype": np.float32, "grad": True, "kinks": None}
_seq = itertools.count()


def get_dtype():
    return _state["dtype"]


@contextmanager
def precision(dtype):
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled():
    return _state["grad"]


@contextmanager
def record_kinks():
    """Collect a fingerprint of every piecewise branch taken (ReLU masks, argmax).

    Finite differences across a kink are meaningless, so the gradient checker
    compares fingerprints of the perturbed and unperturbed forward passes.
    """
    prev = _state["kinks"]
    log = []
    _state["kinks"] = log
    try:
        yield log
    finally:
        _state["kinks"] = prev


def _kink(arr):
    log = _state["kinks"]
    if log is not None:
        log.append(hash(np.ascontiguousarray(arr).tobytes()))


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        dtype = dtype or _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self.op = "leaf"

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    def backward(self, grad=None):
        tape = Tape(self)
        tape.backward(grad)
        return tape

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """The recorded ops reachable from ``root``, in creation (topological) order."""

    def __init__(self, root):
        seen = {id(root): root}
        stack = [root]
        while stack:
            node = stack.pop()
            for p in node._parents:
                if id(p) not in seen:
                    seen[id(p)] = p
                    stack.append(p)
        self.root = root
        self.entries = sorted((n for n in seen.values() if n._backward is not None), key=lambda n: n._seq)
        self.visits = 0

    def __len__(self):
        return len(self.entries)

    def backward(self, grad=None):
        root = self.root
        if grad is None:
            if root.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar root, got shape {root.shape}")
            grad = np.ones_like(root.data)
        root.grad = np.asarray(grad, dtype=root.data.dtype)
        for node in reversed(self.entries):
            self.visits += 1
            if node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(g, dtype=p.data.dtype, copy=True).reshape(p.data.shape)
                else:
                    p.grad = p.grad + g

    def first_nonfinite(self):
        """Name of the first recorded op whose output is NaN/Inf, or None."""
        for node in self.entries:
            if not np.all(np.isfinite(node.data)):
                return node.op
        return None


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _scalar_or_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


# -- elementwise ----------------------------------------------------------
def add(a, b):
    a = as_tensor(a)
    b = _scalar_or_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _scalar_or_tensor(a, b)
    b = _scalar_or_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        k = np.asarray(b, dtype=a.data.dtype)
        return _make(a.data * k, (a,), lambda g: (g * k,), "scale")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def pow_(a, p):
    x = a.data
    out = x**p
    return _make(out, (a,), lambda g: (g * p * x ** (p - 1),), "pow")


def square(a):
    x = a.data
    return _make(x * x, (a,), lambda g: (2 * g * x,), "square")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def relu(a):
    mask = a.data > 0
    _kink(mask)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


LEAKY_SLOPE = 0.01


def leaky_relu(a, slope=LEAKY_SLOPE):
    pos = a.data > 0
    _kink(pos)
    scale = np.where(pos, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def dropout(a, p, training, rng):
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- shape ----------------------------------------------------------------
def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty list")
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


# -- reductions -----------------------------------------------------------
def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _make(np.matmul(ad, bd), (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for ``weight`` of shape (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax_lastdim(x):
    if x.size == 0:
        raise ShapeError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: feature size {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


# -- convolution-family ----------------------------------------------------
def _as4d(x):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (H, W, C) or (N, H, W, C), got {x.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Dense 2-D convolution (cross-correlation), channel-last.

    ``x``: (H, W, Cin) or (N, H, W, Cin); ``weight``: (kh, kw, Cin, Cout).
    """
    xd, squeeze = _as4d(x)
    kh, kw, cin, cout = weight.shape
    if xd.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {xd.shape[-1]} vs weight {weight.shape}")
    n, h, w, _ = xd.shape
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    if squeeze:
        out = out[0]
    xp_shape = xp.shape

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = g2 @ wmat.T
        gxp = kernels.col2im(gcols, xp_shape, kh, kw, stride)
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding]
        gx = gxp[0] if squeeze else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def depthwise_correlate(features, kernel):
    """Per-channel cross-correlation with zero padding; preserves (h, w).

    ``features`` (h, w, d) with ``kernel`` (s, s, d) gives (h, w, d); a kernel
    stack (n, s, s, d) gives (n, h, w, d). Batched features (B, h, w, d) take
    kernels (B, n, s, s, d) and give (B, n, h, w, d).
    """
    if features.ndim == 4:
        return _depthwise_batched(features, kernel)
    if features.ndim != 3:
        raise ShapeError(f"depthwise_correlate: features must be (h, w, d), got {features.shape}")
    single = kernel.ndim == 3
    k = kernel.data[None] if single else kernel.data
    _check_kernel(k, features.shape[-1], kernel.shape)
    pad = (k.shape[1] - 1) // 2
    xp = np.pad(features.data, ((pad, pad), (pad, pad), (0, 0)))
    k = k.astype(xp.dtype, copy=False)
    out = kernels.depthwise_fwd(xp, k)
    kshape = kernel.shape
    h, w = features.shape[:2]

    def bw(g):
        g4 = g[None] if single else g
        gxp, gk = kernels.depthwise_bwd(xp, k, g4)
        return gxp[pad : pad + h, pad : pad + w], gk.reshape(kshape)

    return _make(out[0] if single else out, (features, kernel), bw, "depthwise_correlate")


def _check_kernel(k, d, shape):
    if k.ndim != 4 or k.shape[1] != k.shape[2]:
        raise ShapeError(f"depthwise_correlate: kernel must be square (s, s, d), got {shape}")
    if k.shape[1] % 2 == 0:
        raise ShapeError(f"depthwise_correlate: kernel size must be odd, got {k.shape[1]}")
    if k.shape[3] != d:
        raise ShapeError(f"depthwise_correlate: kernel channels {k.shape[3]} vs feature channels {d}")


def _depthwise_batched(features, kernel):
    b, h, w, d = features.shape
    if kernel.ndim != 5 or kernel.shape[0] != b:
        raise ShapeError(f"depthwise_correlate: batched features {features.shape} need kernels (B, n, s, s, d), got {kernel.shape}")
    _check_kernel(kernel.data[0], d, kernel.shape)
    pad = (kernel.shape[2] - 1) // 2
    xp = np.pad(features.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    k = kernel.data.astype(xp.dtype, copy=False)
    out = np.stack([kernels.depthwise_fwd(xp[i], k[i]) for i in range(b)])

    def bw(g):
        gx = np.empty(features.shape, dtype=xp.dtype)
        gk = np.empty(k.shape, dtype=xp.dtype)
        for i in range(b):
            gxp, gk[i] = kernels.depthwise_bwd(xp[i], k[i], g[i])
            gx[i] = gxp[pad : pad + h, pad : pad + w]
        return gx, gk

    return _make(out, (features, kernel), bw, "depthwise_correlate")


def max_over_set(maps):
    """Elementwise max over a list of equal-shape tensors.

    The gradient goes to the maximising input; ties go to the lowest index.
    """
    maps = list(maps)
    if not maps:
        raise ShapeError("max_over_set of an empty list")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"max_over_set: shape {m.shape} differs from {shape}")
    if len(maps) == 1:
        return maps[0]
    st = np.stack([m.data for m in maps])
    arg = st.argmax(axis=0)
    _kink(arg)
    out = np.take_along_axis(st, arg[None], axis=0)[0]

    def bw(g):
        return tuple(np.where(arg == i, g, 0).astype(g.dtype) for i in range(len(maps)))

    return _make(out, tuple(maps), bw, "max_over_set")


def max_over_axis(stacked, axis=0):
    """``max_over_set`` across one axis of a single tensor (same tie rule)."""
    st = stacked.data
    axis = axis % st.ndim
    n = st.shape[axis]
    if n == 1:
        return reshape(stacked, st.shape[:axis] + st.shape[axis + 1 :])
    arg = np.expand_dims(st.argmax(axis=axis), axis)
    _kink(arg)
    out = np.take_along_axis(st, arg, axis=axis)
    shape = st.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(np.squeeze(out, axis), (stacked,), bw, "max_over_set")


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize with half-pixel centres (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target extents must be positive, got {out_h}x{out_w}")
    xd, squeeze = _as4d(x)
    n, h, w, c = xd.shape
    if (h, w) == (out_h, out_w):
        return x
    out = kernels.resize_fwd(xd, out_h, out_w)

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = kernels.resize_bwd(g4.astype(xd.dtype, copy=False), h, w)
        return (gx[0] if squeeze else gx,)

    return _make(out[0] if squeeze else out, (x,), bw, "bilinear_resize")


def roi_sample_points(box, h, w, s):
    """Continuous (row, col) index coordinates of the s*s bin centres of ``box``."""
    x1, y1, x2, y2 = box
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate box {tuple(box)}")
    ty = y1 * h + (np.arange(s) + 0.5) * ((y2 - y1) * h / s) - 0.5
    tx = x1 * w + (np.arange(s) + 0.5) * ((x2 - x1) * w / s) - 0.5
    ys, xs = np.meshgrid(ty, tx, indexing="ij")
    return ys.ravel(), xs.ravel()


def roi_pool(features, boxes, s):
    """RoI-align style pooling: one bilinear sample per output bin centre.

    ``boxes`` is one normalised (x1, y1, x2, y2) box or a sequence of them;
    returns (s, s, d) or (n, s, s, d) respectively.
    """
    if features.ndim != 3:
        raise ShapeError(f"roi_pool: features must be (h, w, d), got {features.shape}")
    h, w, d = features.shape
    boxes_arr = np.asarray(boxes, dtype=np.float64)
    single = boxes_arr.ndim == 1
    boxes_arr = boxes_arr.reshape(-1, 4)
    pts = [roi_sample_points(b, h, w, s) for b in boxes_arr]
    ys = np.concatenate([p[0] for p in pts])
    xs = np.concatenate([p[1] for p in pts])
    out = kernels.sample_fwd(features.data, ys, xs)
    out_shape = (s, s, d) if single else (len(boxes_arr), s, s, d)

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d), dtype=features.data.dtype)
        return (kernels.sample_bwd(g2, (h, w, d), ys, xs),)

    return _make(out.reshape(out_shape), (features,), bw, "roi_pool")


# -- attention ------------------------------------------------------------
def multi_head_attention(q, k, v, params, heads, k_pos=None, q_pos=None):
    """Scaled dot-product attention over ``heads`` heads.

    Inputs are (..., N, d) with any matching leading batch axes. ``params``
    maps wq/bq/wk/bk/wv/bv/wo/bo to tensors (weights (d, d), applied as
    ``x @ w``). Positional terms, when given, are added to the query/key
    inputs only.
    """
    nq, d = q.shape[-2:]
    nk = k.shape[-2]
    if d % heads:
        raise ShapeError(f"model width {d} is not divisible by {heads} heads")
    if v.shape[-2] != nk:
        raise ShapeError(f"keys have {nk} rows but values have {v.shape[-2]}")
    dh = d // heads
    lead = q.shape[:-2]
    r = len(lead)
    to_heads = tuple(range(r)) + (r + 1, r, r + 2)  # (.., N, H, dh) -> (.., H, N, dh)
    qi = q if q_pos is None else add(q, q_pos)
    ki = k if k_pos is None else add(k, k_pos)
    qh = linear(qi, params["wq"], params["bq"]).reshape(lead + (nq, heads, dh)).transpose(to_heads)
    kh = linear(ki, params["wk"], params["bk"]).reshape(lead + (nk, heads, dh)).transpose(tuple(range(r)) + (r + 1, r + 2, r))
    vh = linear(v, params["wv"], params["bv"]).reshape(lead + (nk, heads, dh)).transpose(to_heads)
    att = softmax_lastdim(mul(matmul(qh, kh), 1.0 / math.sqrt(dh)))
    ctx = matmul(att, vh).transpose(to_heads).reshape(lead + (nq, d))
    return linear(ctx, params["wo"], params["bo"])
