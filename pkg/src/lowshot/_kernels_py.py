"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; ``_ckernels`` must agree with them to
float rounding. All arrays are channel-last.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """Unfold a padded batch ``(N, Hp, Wp, C)`` into ``(N*Ho*Wo, kh*kw*C)`` rows."""
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N, Hp', Wp', C, kh, kw
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, kh * kw * c)


def col2im(cols, xp_shape, kh, kw, stride):
    n, hp, wp, c = xp_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, :, i, j]
    return out


def depthwise_fwd(xp, k):
    """Correlate padded features ``(h+s-1, w+s-1, d)`` with ``n`` kernels ``(n, s, s, d)``."""
    n, s, _, d = k.shape
    h = xp.shape[0] - s + 1
    w = xp.shape[1] - s + 1
    out = np.zeros((n, h, w, d), dtype=xp.dtype)
    for i in range(s):
        for j in range(s):
            out += xp[None, i : i + h, j : j + w, :] * k[:, i, j][:, None, None, :]
    return out


def depthwise_bwd(xp, k, g):
    n, s, _, d = k.shape
    h, w = g.shape[1], g.shape[2]
    gxp = np.zeros_like(xp)
    gk = np.empty_like(k)
    for i in range(s):
        for j in range(s):
            win = xp[i : i + h, j : j + w, :]
            gk[:, i, j] = np.einsum("yxc,nyxc->nc", win, g)
            gxp[i : i + h, j : j + w, :] += np.einsum("nyxc,nc->yxc", g, k[:, i, j])
    return gxp, gk


def _axis_weights(src, size):
    """Bilinear taps along one axis for continuous index positions ``src``."""
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, size - 1)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    return lo, hi, frac


def interp_matrix(src, size, dtype):
    """Dense ``(len(src), size)`` matrix of 1-D linear interpolation weights."""
    lo, hi, frac = _axis_weights(np.asarray(src, dtype=np.float64), size)
    m = np.zeros((len(lo), size), dtype=np.float64)
    rows = np.arange(len(lo))
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_src(out_size, in_size):
    # half-pixel centres, i.e. align_corners=False
    scale = in_size / out_size
    return (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5


def resize_fwd(x, out_h, out_w):
    """Bilinear resize of ``(N, H, W, C)``."""
    n, h, w, c = x.shape
    ah = interp_matrix(resize_src(out_h, h), h, x.dtype)
    aw = interp_matrix(resize_src(out_w, w), w, x.dtype)
    t = np.matmul(ah, x.reshape(n, h, w * c)).reshape(n, out_h, w, c)
    return np.matmul(aw, t)  # broadcast over (N, out_h)


def resize_bwd(g, in_h, in_w):
    n, out_h, out_w, c = g.shape
    ah = interp_matrix(resize_src(out_h, in_h), in_h, g.dtype)
    aw = interp_matrix(resize_src(out_w, in_w), in_w, g.dtype)
    t = np.matmul(aw.T, g)  # N, out_h, in_w, C
    return np.matmul(ah.T, t.reshape(n, out_h, in_w * c)).reshape(n, in_h, in_w, c)


def sample_fwd(f, ys, xs):
    """Bilinear samples of ``f (h, w, d)`` at continuous index points -> ``(P, d)``."""
    h, w, d = f.shape
    y0, y1, fy = _axis_weights(ys, h)
    x0, x1, fx = _axis_weights(xs, w)
    fy = fy.astype(f.dtype)[:, None]
    fx = fx.astype(f.dtype)[:, None]
    return (
        f[y0, x0] * ((1 - fy) * (1 - fx))
        + f[y0, x1] * ((1 - fy) * fx)
        + f[y1, x0] * (fy * (1 - fx))
        + f[y1, x1] * (fy * fx)
    )


def sample_bwd(g, shape, ys, xs):
    h, w, d = shape
    y0, y1, fy = _axis_weights(ys, h)
    x0, x1, fx = _axis_weights(xs, w)
    fy = fy.astype(g.dtype)[:, None]
    fx = fx.astype(g.dtype)[:, None]
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, (y0, x0), g * ((1 - fy) * (1 - fx)))
    np.add.at(out, (y0, x1), g * ((1 - fy) * fx))
    np.add.at(out, (y1, x0), g * (fy * (1 - fx)))
    np.add.at(out, (y1, x1), g * (fy * fx))
    return out
