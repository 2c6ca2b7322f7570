"""Piecewise-planar synthetic scenes with analytic ground truth.

Every plane carries its own procedural texture: a sum of sinusoids in plane
coordinates (metres).  Each sinusoid is attenuated by a Gaussian band limit
evaluated at its frequency as seen from the first camera, so the texture is a
fixed property of the surface (brightness constancy holds exactly between the
views) while its image-space correlation length stays near ``texture_blur``
pixels at every depth.  Ground-truth matches come from ray/plane intersection
and reprojection, never from search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, MotionParams, rotation_from_angles, translation_from_polar
from ..image import FramePair, Image, gaussian_kernel
from .features import select_features
from .motion import handheld_motion

_CHUNK = 16384


class BadSceneGeometry(ValueError):
    pass


@dataclass(frozen=True)
class Plane:
    """Points X (first camera frame) with normal . X = distance; (e1, e2) span the plane."""

    normal: tuple
    distance: float
    e1: tuple
    e2: tuple
    brightness: float = 0.0


LAYOUTS = {
    "driving": [
        Plane((0.0, 1.0, 0.0), 1.6, (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        Plane((-1.0, 0.0, 0.0), 6.0, (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)),
        Plane((1.0, 0.0, 0.0), 7.0, (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)),
        Plane((0.0, 0.0, 1.0), 45.0, (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
    ],
    "handheld": [
        Plane((0.0, 1.0, 0.0), 1.2, (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        Plane((0.0, -1.0, 0.0), 1.4, (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        Plane((-1.0, 0.0, 0.0), 2.0, (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)),
        Plane((1.0, 0.0, 0.0), 2.2, (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)),
        Plane((0.0, 0.0, 1.0), 4.0, (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
    ],
    "wall": [
        Plane((0.0, 0.0, 1.0), 10.0, (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
    ],
}


@dataclass
class SceneConfig:
    layout: str = "driving"
    width: int = 640
    height: int = 256
    fx: float = 360.0
    fy: float = 360.0
    cx: float = 319.5
    cy: float = 127.5
    translation_scale: float = 1.0
    wavelength_min: float = 0.15
    wavelength_max: float = 2.0
    n_waves: int = 40
    contrast: float = 70.0
    spectrum_slope: float = 1.0
    texture_blur: float = 3.0
    n_features: int = 400
    min_distance: float = 8.0
    feature_margin: float = 8.0
    kernel_side: int = 9
    kernel_sigma: float = 2.0
    # standard deviation of additive Gaussian read noise in gray levels (0: ideal renders)
    sensor_noise: float = 0.0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)


PRESET_SCENES = {
    # without read noise the renders are far cleaner than real footage and the
    # image term alone is already more accurate than any motion prediction
    "driving": SceneConfig(sensor_noise=8.0),
    "handheld": SceneConfig(layout="handheld", width=640, height=480, fx=480.0, fy=480.0, cx=319.5, cy=239.5,
                            translation_scale=0.03, wavelength_min=0.03, wavelength_max=0.5),
}


class Texture:
    def __init__(self, rng: np.random.Generator, n_waves, lam_min, lam_max, base, contrast, slope=1.0):
        lam = np.exp(rng.uniform(np.log(lam_min), np.log(lam_max), n_waves))
        ang = rng.uniform(0.0, np.pi, n_waves)
        self.k = (2.0 * np.pi / lam)[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
        self.phase = rng.uniform(0.0, 2.0 * np.pi, n_waves)
        amp = lam**slope
        self.amp = amp / np.sqrt(np.sum(amp**2) / 2.0)
        self.base = base
        self.contrast = contrast

    def shade(self, st, jac, blur) -> np.ndarray:
        """Intensity at plane coordinates st (P, 2); jac (P, 2, 2) is d(st)/d(pixel)
        in the reference view and ``blur`` the band-limit width in its pixels."""
        out = np.empty(len(st))
        for a in range(0, len(st), _CHUNK):
            s = st[a : a + _CHUNK]
            j = jac[a : a + _CHUNK]
            ph = s @ self.k.T + self.phase
            wu = j[:, 0, 0:1] * self.k[:, 0] + j[:, 1, 0:1] * self.k[:, 1]
            wv = j[:, 0, 1:2] * self.k[:, 0] + j[:, 1, 1:2] * self.k[:, 1]
            att = np.exp(-0.5 * blur**2 * (wu * wu + wv * wv))
            out[a : a + _CHUNK] = np.sin(ph) * att @ self.amp
        return self.base + self.contrast * np.tanh(out / 1.5)


def _intersect(planes, center, dirs):
    """Nearest positive plane hit along rays center + lam * dirs; returns (lam, plane index)."""
    lams = np.full((len(planes), len(dirs)), np.inf)
    for i, pl in enumerate(planes):
        n = np.asarray(pl.normal)
        den = dirs @ n
        num = pl.distance - n @ center
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = num / den
        lams[i] = np.where((den != 0) & (lam > 1e-9), lam, np.inf)
    idx = np.argmin(lams, axis=0)
    return lams[idx, np.arange(len(dirs))], idx


@dataclass
class View:
    image: Image
    plane_id: np.ndarray
    depth: np.ndarray


def render_view(planes, textures, K: CameraIntrinsics, width, height, R_to_first, center, blur=3.0) -> View:
    """Render the camera at ``center`` whose axes map to the first frame by ``R_to_first``.

    Texture band limits always refer to the first camera's pixel grid.
    """
    v, u = np.mgrid[0:height, 0:width]
    uv = np.column_stack([u.ravel(), v.ravel()]).astype(float)
    dirs = K.backproject(uv) @ R_to_first.T
    center = np.asarray(center, dtype=float)
    lam, idx = _intersect(planes, center, dirs)
    if not np.all(np.isfinite(lam)):
        raise BadSceneGeometry("some viewing rays hit no plane")
    du = np.array([1.0 / K.fx, 0.0, 0.0])
    dv = np.array([0.0, 1.0 / K.fy, 0.0])
    img = np.empty(len(uv))
    for i, pl in enumerate(planes):
        sel = idx == i
        if not np.any(sel):
            continue
        n = np.asarray(pl.normal)
        d = dirs[sel]
        X = center + lam[sel][:, None] * d
        # plane-coordinate derivatives w.r.t. first-camera pixels at the hit point
        z = X[:, 2:3]
        if np.any(z <= 1e-9):
            raise BadSceneGeometry("surface point behind the first camera")
        d1 = X / z
        nd = (d1 @ n)[:, None]
        Xu = z * (du - d1 * (n @ du) / nd)
        Xv = z * (dv - d1 * (n @ dv) / nd)
        e1, e2 = np.asarray(pl.e1), np.asarray(pl.e2)
        st = np.column_stack([X @ e1, X @ e2])
        jac = np.stack([np.column_stack([Xu @ e1, Xv @ e1]), np.column_stack([Xu @ e2, Xv @ e2])], axis=1)
        img[sel] = textures[i].shade(st, jac, blur)
    # depth along the optical axis equals lam because backprojected rays have unit z
    return View(Image(img.reshape(height, width)), idx.reshape(height, width), lam.reshape(height, width))


@dataclass
class SyntheticScene:
    config: SceneConfig
    seed: int
    p_gt: MotionParams
    scale: float
    planes: list
    frames: FramePair
    views: tuple
    xs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ys_gt: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    insufficient_texture: bool = False

    @property
    def K(self) -> CameraIntrinsics:
        return self.frames.K

    @property
    def R_gt(self) -> np.ndarray:
        return rotation_from_angles(self.p_gt)

    @property
    def t_gt(self) -> np.ndarray:
        return translation_from_polar(self.p_gt.alpha, self.p_gt.beta)

    def correspondences(self, xs):
        """Exact matches in the second view and a mask of usable ones.

        A match is usable when the patch window around x (first view) and y
        (second view) each see only the hit plane and y is visible, not occluded.
        """
        xs = np.asarray(xs, dtype=float).reshape(-1, 2)
        K = self.K
        lam, idx = _intersect(self.planes, np.zeros(3), K.backproject(xs))
        X1 = lam[:, None] * K.backproject(xs)
        X2 = X1 @ self.R_gt.T - self.scale * self.t_gt
        with np.errstate(divide="ignore", invalid="ignore"):
            ys = K.project(X2)
        ok = np.isfinite(lam) & (X2[:, 2] > 1e-6) & np.all(np.isfinite(ys), axis=1)
        cfg = self.config
        r = cfg.kernel_side // 2
        m = r + cfg.feature_margin + 1
        w, h = cfg.width, cfg.height
        for pts in (xs, ys):
            ok &= (pts[:, 0] >= m) & (pts[:, 0] <= w - 1 - m) & (pts[:, 1] >= m) & (pts[:, 1] <= h - 1 - m)
        win = int(np.ceil(r + cfg.feature_margin + 1))
        for k in np.flatnonzero(ok):
            for view, pt in ((self.views[0], xs[k]), (self.views[1], ys[k])):
                c, rr = int(round(pt[0])), int(round(pt[1]))
                patch = view.plane_id[rr - win : rr + win + 1, c - win : c + win + 1]
                if np.any(patch != idx[k]):
                    ok[k] = False
                    break
            if ok[k]:
                c, rr = int(round(ys[k, 0])), int(round(ys[k, 1]))
                if abs(self.views[1].depth[rr, c] - X2[k, 2]) > 0.05 * X2[k, 2] + 0.05:
                    ok[k] = False
        return ys, ok


def render_scene(config: SceneConfig | None = None, seed: int = 0, p_gt=None, scale=None) -> SyntheticScene:
    """Render both views and attach up to ``config.n_features`` exact correspondences."""
    config = config or SceneConfig()
    if config.layout not in LAYOUTS:
        raise BadSceneGeometry(f"unknown layout {config.layout!r}")
    rng = np.random.default_rng(seed)
    planes = LAYOUTS[config.layout]
    textures = [
        Texture(rng, config.n_waves, config.wavelength_min, config.wavelength_max,
                128.0 + rng.uniform(-30.0, 30.0), config.contrast, config.spectrum_slope)
        for _ in planes
    ]
    if p_gt is None:
        p_gt = handheld_motion(rng) if config.layout == "handheld" else MotionParams(0, 0, 0, 0, 0)
    elif not isinstance(p_gt, MotionParams):
        p_gt = MotionParams.from_array(p_gt)
    scale = config.translation_scale if scale is None else float(scale)
    K = config.intrinsics
    R = rotation_from_angles(p_gt)
    t = translation_from_polar(p_gt.alpha, p_gt.beta)
    v1 = render_view(planes, textures, K, config.width, config.height, np.eye(3), np.zeros(3), config.texture_blur)
    # X2 = R X1 - s t  =>  second camera centre in the first frame is s R^T t
    v2 = render_view(planes, textures, K, config.width, config.height, R.T, scale * R.T @ t, config.texture_blur)
    I, J = v1.image, v2.image
    if config.sensor_noise > 0:
        noise_rng = np.random.default_rng([seed, 2])
        I, J = (Image(np.clip(im.data + noise_rng.normal(0.0, config.sensor_noise, im.data.shape), 0.0, 255.0))
                for im in (I, J))
    scene = SyntheticScene(config, seed, p_gt, scale, planes, FramePair(I, J, K), (v1, v2))
    if config.n_features > 0:
        border = int(np.ceil(config.kernel_side // 2 + config.feature_margin + 1))
        kernel = gaussian_kernel(config.kernel_side, config.kernel_sigma)
        cand, _ = select_features(I, 3 * config.n_features, config.min_distance, border, kernel)
        ys, ok = scene.correspondences(cand)
        scene.xs = cand[ok][: config.n_features]
        scene.ys_gt = ys[ok][: config.n_features]
        scene.insufficient_texture = len(scene.xs) < config.n_features
    return scene
