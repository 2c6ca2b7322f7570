"""Corner selection by the smaller eigenvalue of the weighted structure tensor."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..image import Image, WeightKernel, gaussian_kernel


def min_eigen_response(img: Image, kernel: WeightKernel) -> np.ndarray:
    """lambda_min of the kernel-weighted structure tensor at every pixel.

    At integer positions this equals lambda_min of the patch matrix A built
    with I = J, since bilinear gradients reduce to grid central differences.
    """
    gx, gy = img.gradient_images
    w = kernel.weights
    sxx = ndimage.correlate(gx * gx, w, mode="constant")
    sxy = ndimage.correlate(gx * gy, w, mode="constant")
    syy = ndimage.correlate(gy * gy, w, mode="constant")
    return (sxx + syy) / 2.0 - np.hypot((sxx - syy) / 2.0, sxy)


def select_features(img: Image, n: int, min_distance: float = 8.0, border: int = 10,
                    kernel: WeightKernel | None = None, quality: float = 0.01):
    """Top-n corners with greedy non-maximum suppression at ``min_distance``.

    Returns ``(points, insufficient)``: an (m, 2) array of (x, y) pixel
    positions, m <= n, in descending response order, and a flag set when fewer
    than n corners were found.
    """
    kernel = kernel or gaussian_kernel()
    resp = min_eigen_response(img, kernel)
    h, w = resp.shape
    inner = np.zeros_like(resp, dtype=bool)
    if border < h - border and border < w - border:
        inner[border : h - border, border : w - border] = True
    top = resp[inner].max(initial=0.0)
    if not top > 1e-9:
        return np.zeros((0, 2)), True
    rows, cols = np.nonzero(inner & (resp >= quality * top))
    vals = resp[rows, cols]
    order = np.lexsort((cols, rows, -vals))
    # greedy suppression: a pixel is blocked once it lies within min_distance of a chosen corner
    r = max(int(np.ceil(min_distance)) - 1, 0)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    disk = dx * dx + dy * dy < min_distance * min_distance
    blocked = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    chosen = []
    for i in order:
        y, x = rows[i], cols[i]
        if blocked[y + r, x + r]:
            continue
        chosen.append((float(x), float(y)))
        if len(chosen) == n:
            break
        blocked[y : y + 2 * r + 1, x : x + 2 * r + 1] |= disk
    pts = np.array(chosen, dtype=float).reshape(-1, 2)
    return pts, len(pts) < n
