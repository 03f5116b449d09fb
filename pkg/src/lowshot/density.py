"""Ground-truth density maps: one renormalised, truncated Gaussian per point."""

from __future__ import annotations

import numpy as np


def kernel_size_px(boxes, height, width):
    """One eighth of the mean exemplar size ((w + h) / 2) in pixels."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        raise ValueError("kernel size needs at least one exemplar box")
    bw = (boxes[:, 2] - boxes[:, 0]) * width
    bh = (boxes[:, 3] - boxes[:, 1]) * height
    return float(np.mean((bw + bh) / 2.0)) / 8.0


def sigma_for_kernel(size, ratio=1.0):
    """Gaussian std for a kernel size. At ratio 1 the std equals the size:
    desk-scale objects are ~10 px, and a narrower std puts nearly all of an
    object's mass on one pixel."""
    return float(size) * ratio


def point_kernel(py, px, sigma, height, width):
    """Truncated Gaussian around continuous pixel-centre coordinates (py, px).

    Pixels whose centre lies within max(2 sigma, 0.5) of the point along both
    axes are kept, so the nearest pixel is always included. Returns
    ``(y0, x0, patch)`` with ``patch`` summing to exactly 1 after clipping to
    the image.
    """
    r = max(2.0 * sigma, 0.5)
    ys = np.arange(int(np.ceil(py - r)), int(np.floor(py + r)) + 1)
    xs = np.arange(int(np.ceil(px - r)), int(np.floor(px + r)) + 1)
    ys = ys[(ys >= 0) & (ys < height)]
    xs = xs[(xs >= 0) & (xs < width)]
    if len(ys) == 0 or len(xs) == 0:
        # point sits outside the pixel-centre grid by more than r: use the nearest pixel
        ys = np.array([int(np.clip(round(py), 0, height - 1))])
        xs = np.array([int(np.clip(round(px), 0, width - 1))])
    s2 = 2.0 * max(sigma, 1e-6) ** 2
    patch = np.exp(-((ys[:, None] - py) ** 2) / s2) * np.exp(-((xs[None, :] - px) ** 2) / s2)
    total = patch.sum()
    if total <= 0:  # far tails underflowed; fall back to the nearest kept pixel
        patch = np.zeros_like(patch)
        patch[np.argmin(np.abs(ys - py)), np.argmin(np.abs(xs - px))] = 1.0
        total = 1.0
    return ys[0], xs[0], patch / total


def gt_density(points, boxes, height, width, default_kernel=None, sigma_ratio=1.0):
    """Density (height, width) with unit mass per point.

    ``points``: (k, 2) normalised (x, y) in [0, 1]. ``boxes``: exemplar boxes
    setting the kernel size; when empty, ``default_kernel`` (pixels) is used.
    The Gaussian std is ``sigma_ratio`` times the kernel size.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((height, width), dtype=np.float64)
    if len(points) == 0:
        return out.astype(np.float32)
    if np.any(points < 0) or np.any(points > 1):
        raise ValueError("points must lie inside the image (normalised coordinates in [0, 1])")
    if boxes is not None and len(boxes):
        size = kernel_size_px(boxes, height, width)
    elif default_kernel is not None:
        size = float(default_kernel)
    else:
        raise ValueError("gt_density needs exemplar boxes or a default kernel size")
    sigma = sigma_for_kernel(size, sigma_ratio)
    for x, y in points:
        py, px = y * height - 0.5, x * width - 0.5
        y0, x0, patch = point_kernel(py, px, sigma, height, width)
        out[y0 : y0 + patch.shape[0], x0 : x0 + patch.shape[1]] += patch
    return out.astype(np.float32)


def hflip_density(dmap):
    return np.ascontiguousarray(np.asarray(dmap)[:, ::-1])
