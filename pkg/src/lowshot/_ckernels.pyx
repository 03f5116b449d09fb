# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``. Same signatures."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2], c = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n * ho * wo, kh * kw * c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, ch, row, col
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    row = (b * ho + y) * wo + x
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[row, col] = xp[b, y * stride + i, x * stride + j, ch]
                                col += 1
    return out_arr


def col2im(real[:, ::1] cols, tuple xp_shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp_shape[0], hp = xp_shape[1], wp = xp_shape[2], c = xp_shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros(xp_shape, dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, ch, row, col
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    row = (b * ho + y) * wo + x
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[b, y * stride + i, x * stride + j, ch] += cols[row, col]
                                col += 1
    return out_arr


def depthwise_fwd(real[:, :, ::1] xp, real[:, :, :, ::1] k):
    cdef Py_ssize_t n = k.shape[0], s = k.shape[1], d = k.shape[3]
    cdef Py_ssize_t h = xp.shape[0] - s + 1, w = xp.shape[1] - s + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, h, w, d), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t q, y, x, i, j, ch
    cdef real acc
    with nogil:
        for q in range(n):
            for y in range(h):
                for x in range(w):
                    for ch in range(d):
                        acc = 0
                        for i in range(s):
                            for j in range(s):
                                acc = acc + xp[y + i, x + j, ch] * k[q, i, j, ch]
                        out[q, y, x, ch] = acc
    return out_arr


def depthwise_bwd(real[:, :, ::1] xp, real[:, :, :, ::1] k, real[:, :, :, ::1] g):
    cdef Py_ssize_t n = k.shape[0], s = k.shape[1], d = k.shape[3]
    cdef Py_ssize_t h = g.shape[1], w = g.shape[2]
    dtype = np.float32 if real is float else np.float64
    gxp_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2]), dtype=dtype)
    gk_arr = np.zeros((n, s, s, d), dtype=dtype)
    cdef real[:, :, ::1] gxp = gxp_arr
    cdef real[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t q, y, x, i, j, ch
    cdef real gv
    with nogil:
        for q in range(n):
            for y in range(h):
                for x in range(w):
                    for i in range(s):
                        for j in range(s):
                            for ch in range(d):
                                gv = g[q, y, x, ch]
                                gk[q, i, j, ch] += xp[y + i, x + j, ch] * gv
                                gxp[y + i, x + j, ch] += k[q, i, j, ch] * gv
    return gxp_arr, gk_arr


cdef inline void _taps(double src, Py_ssize_t size, Py_ssize_t* lo, Py_ssize_t* hi, double* frac) nogil:
    if src < 0:
        src = 0
    if src > size - 1:
        src = size - 1
    lo[0] = <Py_ssize_t>floor(src)
    if lo[0] > size - 1:
        lo[0] = size - 1
    hi[0] = lo[0] + 1 if lo[0] + 1 < size else size - 1
    frac[0] = src - lo[0]


cdef void _axis_taps(Py_ssize_t out_size, Py_ssize_t in_size, Py_ssize_t* lo, Py_ssize_t* hi,
                     double* frac) noexcept nogil:
    cdef double scale = <double>in_size / out_size
    cdef Py_ssize_t i
    for i in range(out_size):
        _taps((i + 0.5) * scale - 0.5, in_size, &lo[i], &hi[i], &frac[i])


def resize_fwd(real[:, :, :, ::1] x, int out_h, int out_w):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, out_h, out_w, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t[::1] ylo = np.empty(out_h, np.intp), yhi = np.empty(out_h, np.intp)
    cdef Py_ssize_t[::1] xlo = np.empty(out_w, np.intp), xhi = np.empty(out_w, np.intp)
    cdef double[::1] fys = np.empty(out_h), fxs = np.empty(out_w)
    cdef Py_ssize_t b, oy, ox, ch, y0, y1, x0, x1
    cdef real fy, fx, w00, w01, w10, w11
    with nogil:
        _axis_taps(out_h, h, &ylo[0], &yhi[0], &fys[0])
        _axis_taps(out_w, w, &xlo[0], &xhi[0], &fxs[0])
        for b in range(n):
            for oy in range(out_h):
                y0 = ylo[oy]
                y1 = yhi[oy]
                fy = <real>fys[oy]
                for ox in range(out_w):
                    x0 = xlo[ox]
                    x1 = xhi[ox]
                    fx = <real>fxs[ox]
                    w00 = (1 - fy) * (1 - fx)
                    w01 = (1 - fy) * fx
                    w10 = fy * (1 - fx)
                    w11 = fy * fx
                    for ch in range(c):
                        out[b, oy, ox, ch] = (w00 * x[b, y0, x0, ch] + w01 * x[b, y0, x1, ch]
                                              + w10 * x[b, y1, x0, ch] + w11 * x[b, y1, x1, ch])
    return out_arr


def resize_bwd(real[:, :, :, ::1] g, int in_h, int in_w):
    cdef Py_ssize_t n = g.shape[0], out_h = g.shape[1], out_w = g.shape[2], c = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, in_h, in_w, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t[::1] ylo = np.empty(out_h, np.intp), yhi = np.empty(out_h, np.intp)
    cdef Py_ssize_t[::1] xlo = np.empty(out_w, np.intp), xhi = np.empty(out_w, np.intp)
    cdef double[::1] fys = np.empty(out_h), fxs = np.empty(out_w)
    cdef Py_ssize_t b, oy, ox, ch, y0, y1, x0, x1
    cdef real fy, fx, w00, w01, w10, w11, gv
    with nogil:
        _axis_taps(out_h, in_h, &ylo[0], &yhi[0], &fys[0])
        _axis_taps(out_w, in_w, &xlo[0], &xhi[0], &fxs[0])
        for b in range(n):
            for oy in range(out_h):
                y0 = ylo[oy]
                y1 = yhi[oy]
                fy = <real>fys[oy]
                for ox in range(out_w):
                    x0 = xlo[ox]
                    x1 = xhi[ox]
                    fx = <real>fxs[ox]
                    w00 = (1 - fy) * (1 - fx)
                    w01 = (1 - fy) * fx
                    w10 = fy * (1 - fx)
                    w11 = fy * fx
                    for ch in range(c):
                        gv = g[b, oy, ox, ch]
                        out[b, y0, x0, ch] += w00 * gv
                        out[b, y0, x1, ch] += w01 * gv
                        out[b, y1, x0, ch] += w10 * gv
                        out[b, y1, x1, ch] += w11 * gv
    return out_arr


def sample_fwd(real[:, :, ::1] f, double[::1] ys, double[::1] xs):
    cdef Py_ssize_t h = f.shape[0], w = f.shape[1], d = f.shape[2], p = ys.shape[0]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((p, d), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t q, ch, y0, y1, x0, x1
    cdef double fy, fx
    cdef real w00, w01, w10, w11
    with nogil:
        for q in range(p):
            _taps(ys[q], h, &y0, &y1, &fy)
            _taps(xs[q], w, &x0, &x1, &fx)
            w00 = <real>((1 - fy) * (1 - fx))
            w01 = <real>((1 - fy) * fx)
            w10 = <real>(fy * (1 - fx))
            w11 = <real>(fy * fx)
            for ch in range(d):
                out[q, ch] = (f[y0, x0, ch] * w00 + f[y0, x1, ch] * w01
                              + f[y1, x0, ch] * w10 + f[y1, x1, ch] * w11)
    return out_arr


def sample_bwd(real[:, ::1] g, tuple shape, double[::1] ys, double[::1] xs):
    cdef Py_ssize_t h = shape[0], w = shape[1], d = shape[2], p = ys.shape[0]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros(shape, dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t q, ch, y0, y1, x0, x1
    cdef double fy, fx
    cdef real w00, w01, w10, w11, gv
    with nogil:
        for q in range(p):
            _taps(ys[q], h, &y0, &y1, &fy)
            _taps(xs[q], w, &x0, &x1, &fx)
            w00 = <real>((1 - fy) * (1 - fx))
            w01 = <real>((1 - fy) * fx)
            w10 = <real>(fy * (1 - fx))
            w11 = <real>(fy * fx)
            for ch in range(d):
                gv = g[q, ch]
                out[y0, x0, ch] += w00 * gv
                out[y0, x1, ch] += w01 * gv
                out[y1, x0, ch] += w10 * gv
                out[y1, x1, ch] += w11 * gv
    return out_arr
