"""Grayscale images, sub-pixel sampling and per-feature patch linearizations."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics


class OutOfBounds(ValueError):
    pass


class BadKernelSpec(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


class Image:
    """Immutable row-major float image, gray values nominally in [0, 255]."""

    def __init__(self, data):
        a = np.array(data, dtype=np.float64, copy=True)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("image contains non-finite intensities")
        a.setflags(write=False)
        self.data = a

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @cached_property
    def _flat(self):
        return self.data.ravel()

    @cached_property
    def gradient_images(self) -> tuple[np.ndarray, np.ndarray]:
        # Central differences on the pixel grid; bilinear interpolation of these
        # equals central differences of bilinear samples with unit step.
        d = self.data
        gx = np.zeros_like(d)
        gy = np.zeros_like(d)
        gx[:, 1:-1] = (d[:, 2:] - d[:, :-2]) / 2.0
        gy[1:-1, :] = (d[2:, :] - d[:-2, :]) / 2.0
        gx.setflags(write=False)
        gy.setflags(write=False)
        return gx, gy

    def inside(self, xs, ys, margin=0.0) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        return (xs >= margin) & (xs <= self.width - 1 - margin) & (ys >= margin) & (ys <= self.height - 1 - margin)


@dataclass(frozen=True)
class FramePair:
    """Two views I (first) and J (second) of a camera with intrinsics K."""

    I: Image
    J: Image
    K: CameraIntrinsics


def _bilinear(flat, w, h, xs, ys):
    """Bilinear lookup on a raveled (h, w) array; coordinates must be in range."""
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    if w > 1:
        x0 = np.minimum(x0, w - 2)
    if h > 1:
        y0 = np.minimum(y0, h - 2)
    fx = xs - x0
    fy = ys - y0
    i = y0.astype(np.intp) * w + x0.astype(np.intp)
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    top = flat[i] * (1.0 - fx) + flat[i + dx] * fx
    bot = flat[i + dy] * (1.0 - fx) + flat[i + dy + dx] * fx
    return top * (1.0 - fy) + bot * fy


def sample(img: Image, xs, ys) -> np.ndarray:
    """Vectorized bilinear sampling; raises OutOfBounds if any point leaves the image."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if not np.all(img.inside(xs, ys)):
        raise OutOfBounds("sample position outside the image")
    return _bilinear(img._flat, img.width, img.height, xs, ys)


def sample_bilinear(img: Image, pt) -> float:
    x, y = np.asarray(pt, dtype=float)
    return float(sample(img, x, y))


def gradient(img: Image, pt) -> np.ndarray:
    """Central differences of bilinear samples at unit step."""
    x, y = np.asarray(pt, dtype=float)
    if not img.inside(x, y, margin=1.0):
        raise OutOfBounds("gradient needs one pixel of margin")
    f = img._flat
    w, h = img.width, img.height
    gx = (_bilinear(f, w, h, x + 1.0, y) - _bilinear(f, w, h, x - 1.0, y)) / 2.0
    gy = (_bilinear(f, w, h, x, y + 1.0) - _bilinear(f, w, h, x, y - 1.0)) / 2.0
    return np.array([gx, gy])


@dataclass(frozen=True)
class WeightKernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise BadKernelSpec("kernel must be square with odd side")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise BadKernelSpec("kernel must be non-negative and sum to one")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def side(self) -> int:
        return self.weights.shape[0]

    @property
    def radius(self) -> int:
        return self.side // 2

    @cached_property
    def offsets(self) -> np.ndarray:
        """(side*side, 2) pixel offsets (dx, dy) in row-major order."""
        r = self.radius
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        return np.stack([dx.ravel(), dy.ravel()], axis=-1).astype(float)

    @cached_property
    def flat(self) -> np.ndarray:
        return self.weights.ravel()


def gaussian_kernel(side: int = 9, sigma: float = 2.0) -> WeightKernel:
    if int(side) != side or side < 3 or side % 2 == 0:
        raise BadKernelSpec(f"side must be an odd integer >= 3, got {side}")
    if not (sigma > 0 and np.isfinite(sigma)):
        raise BadKernelSpec(f"sigma must be positive, got {sigma}")
    r = side // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    w = np.outer(g, g)
    return WeightKernel(w / w.sum())


def flat_kernel(side: int = 9) -> WeightKernel:
    if int(side) != side or side < 1 or side % 2 == 0:
        raise BadKernelSpec(f"side must be an odd positive integer, got {side}")
    return WeightKernel(np.full((side, side), 1.0 / side**2))


@dataclass
class PatchSystem:
    """Quadratic model v^T A v + 2 v^T b + c of the patch WSSD around the current y."""

    A: np.ndarray
    b: np.ndarray
    c: float
    k: int = 0
    valid: bool = True

    def model(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(v @ self.A @ v + 2.0 * v @ self.b + self.c)


@dataclass
class PatchSystems:
    """Batched patch systems: A (N, 2, 2), b (N, 2), c (N,), valid (N,)."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.c)

    def __getitem__(self, k) -> PatchSystem:
        return PatchSystem(self.A[k].copy(), self.b[k].copy(), float(self.c[k]), k, bool(self.valid[k]))


def patches_valid(img: Image, pts, kernel: WeightKernel, margin=1.0) -> np.ndarray:
    """True where the whole patch support stays `margin` px inside the image."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    r = kernel.radius
    return (
        np.all(np.isfinite(pts), axis=1)
        & (pts[:, 0] - r >= margin)
        & (pts[:, 0] + r <= img.width - 1 - margin)
        & (pts[:, 1] - r >= margin)
        & (pts[:, 1] + r <= img.height - 1 - margin)
    )


def _patch_gather(img: Image, pts, kernel: WeightKernel, flats):
    """Bilinear patch samples of each raveled (h, w) array in ``flats``: list of (N, side*side).

    Kernel offsets are integers, so one floor and one pair of fractions per
    feature serve the whole patch: gather the (side+1)^2 integer window once
    and blend neighbours.  Centres are clamped so that the support stays
    inside the image; callers mask patches that needed clamping.
    """
    w, h, r = img.width, img.height, kernel.radius
    side = kernel.side
    pts = np.nan_to_num(np.asarray(pts, dtype=float).reshape(-1, 2))
    x = np.clip(pts[:, 0], r, max(w - 1 - r, r))
    y = np.clip(pts[:, 1], r, max(h - 1 - r, r))
    x0 = np.minimum(np.floor(x), max(w - 2 - r, r))
    y0 = np.minimum(np.floor(y), max(h - 2 - r, r))
    fx = (x - x0)[:, None, None]
    fy = (y - y0)[:, None, None]
    o = np.arange(-r, r + 2)
    idx = (y0.astype(np.intp) * w + x0.astype(np.intp))[:, None, None] + (o[:, None] * w + o[None, :])[None]
    if w <= side or h <= side:  # image too small for the window: keep indices legal
        idx = np.clip(idx, 0, w * h - 1)
    out = []
    for flat in flats:
        win = flat[idx]
        top = win[:, :-1, :-1] * (1.0 - fx) + win[:, :-1, 1:] * fx
        bot = win[:, 1:, :-1] * (1.0 - fx) + win[:, 1:, 1:] * fx
        out.append((top * (1.0 - fy) + bot * fy).reshape(len(pts), side * side))
    return out


def sample_patches(img: Image, pts, kernel: WeightKernel) -> np.ndarray:
    """(N, side*side) bilinear samples; patches reaching outside the image are clamped inward."""
    return _patch_gather(img, pts, kernel, [img._flat])[0]


def patch_systems(I: Image, J: Image, xs, ys, kernel: WeightKernel, I_patches=None) -> PatchSystems:
    """Linearize the WSSD of every feature around its current match y_k.

    ``I_patches`` may carry precomputed ``sample_patches(I, xs, kernel)``.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    valid = patches_valid(I, xs, kernel) & patches_valid(J, ys, kernel)
    Iv = sample_patches(I, xs, kernel) if I_patches is None else I_patches
    gxi, gyi = J.gradient_images
    Jv, gx, gy = _patch_gather(J, ys, kernel, [J._flat, gxi.ravel(), gyi.ravel()])
    e = Iv - Jv
    w = kernel.flat
    wgx = gx * w
    wgy = gy * w
    A = np.empty((len(xs), 2, 2))
    A[:, 0, 0] = np.einsum("ij,ij->i", wgx, gx)
    A[:, 0, 1] = A[:, 1, 0] = np.einsum("ij,ij->i", wgx, gy)
    A[:, 1, 1] = np.einsum("ij,ij->i", wgy, gy)
    b = -np.stack([np.einsum("ij,ij->i", wgx, e), np.einsum("ij,ij->i", wgy, e)], axis=-1)
    c = (e * e) @ w
    A[~valid] = 0.0
    b[~valid] = 0.0
    c[~valid] = 0.0
    return PatchSystems(A, b, c, valid)


def patch_system(I: Image, J: Image, x_k, y_k, kernel: WeightKernel, k: int = 0) -> PatchSystem:
    s = patch_systems(I, J, [x_k], [y_k], kernel)
    return PatchSystem(s.A[0], s.b[0], float(s.c[0]), k, bool(s.valid[0]))


def wssd_batch(I: Image, J: Image, xs, vs, kernel: WeightKernel, I_patches=None) -> tuple[np.ndarray, np.ndarray]:
    """Exact WSSD per feature for displacement v_k; returns (values, valid).

    Invalid features (patch leaves either image) get NaN.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = xs + np.asarray(vs, dtype=float).reshape(-1, 2)
    valid = patches_valid(I, xs, kernel, margin=0.0) & patches_valid(J, ys, kernel, margin=0.0)
    Iv = sample_patches(I, xs, kernel) if I_patches is None else I_patches
    e = Iv - sample_patches(J, ys, kernel)
    q = (e * e) @ kernel.flat
    q[~valid] = np.nan
    return q, valid


def wssd(I: Image, J: Image, x_k, v_k, kernel: WeightKernel) -> float:
    q, valid = wssd_batch(I, J, [x_k], [v_k], kernel)
    if not valid[0]:
        raise OutOfBounds("patch leaves the image")
    return float(q[0])


# --- file I/O -------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int, pos: int):
    toks = []
    while len(toks) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        toks.append(buf[start:pos])
    return toks, pos


def read_pgm(path) -> Image:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (P5)")
    (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return Image(data.reshape(h, w))


def write_pgm(path, img) -> None:
    a = img.data if isinstance(img, Image) else np.asarray(img)
    a = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + a.tobytes())


def load_image(path) -> Image:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm(path)
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        return Image(np.asarray(im.convert("L"), dtype=np.float64))


def save_image(path, img) -> None:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        write_pgm(path, img)
        return
    from PIL import Image as PILImage

    a = img.data if isinstance(img, Image) else np.asarray(img)
    PILImage.fromarray(np.clip(np.rint(a), 0, 255).astype(np.uint8), mode="L").save(path)
