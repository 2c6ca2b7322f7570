"""Independent reference computations shared by unit and acceptance tests.

Nothing here calls the closed forms under test: constrained minima come from
sampling the constraint line, derivatives from five-point stencils.
"""

import numpy as np

from jetpose.geometry import CameraIntrinsics, MotionParams, fundamental_matrix
from jetpose.image import Image
from jetpose.solver import ResidualBlock, ResidualProblem

K_TEST = CameraIntrinsics(360.0, 360.0, 319.5, 127.5)


def random_psd(rng, max_cond=1e4, scale=None):
    scale = rng.uniform(1.0, 500.0) if scale is None else scale
    ang = rng.uniform(0, np.pi)
    U = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    cond = np.exp(rng.uniform(0, np.log(max_cond)))
    return scale * U @ np.diag([1.0, 1.0 / cond]) @ U.T


def random_pose(rng, rot=0.05, trans=0.5):
    return MotionParams(*rng.uniform(-rot, rot, 3), *rng.uniform(-trans, trans, 2))


def constrained_instance(rng):
    """(A, b, x, y, F) with x, y in a 640x256 image and a generic driving-like pose."""
    A = random_psd(rng)
    b = rng.normal(0, 1, 2) * np.sqrt(np.trace(A)) * rng.uniform(0.1, 10)
    x = rng.uniform([20, 20], [620, 236])
    y = x + rng.uniform(-8, 8, 2)
    F = fundamental_matrix(random_pose(rng), K_TEST)
    return A, b, x, y, F


def line_sweep_minimum(A, b, x, y, F, n=1000, half=None):
    """Minimum of v^T A v + 2 v^T b over v with (y + v) on the epipolar line of x."""
    l = F @ np.array([x[0], x[1], 1.0])
    g = l[:2]
    foot = y - (l @ np.array([y[0], y[1], 1.0])) * g / (g @ g)
    d = np.array([-g[1], g[0]]) / np.hypot(*g)
    # the unconstrained optimum bounds where the constrained one can be
    u = -np.linalg.solve(A, b)
    centre = (y + u - foot) @ d
    half = half or 2.0 * (np.linalg.norm(u) + np.linalg.norm(y - foot) + 1.0) * np.sqrt(np.linalg.cond(A))
    s = centre + np.linspace(-half, half, n)
    best_q, best_v = np.inf, None
    for _ in range(3):  # coarse-to-fine sweep, each with n samples
        V = foot + s[:, None] * d - y
        q = np.einsum("ni,ij,nj->n", V, A, V) + 2 * V @ b
        i = int(np.argmin(q))
        if q[i] < best_q:
            best_q, best_v = q[i], V[i]
        h = s[1] - s[0]
        s = s[i] + np.linspace(-2 * h, 2 * h, n)
    return best_q, best_v


def stencil5(fn, p, h=1e-4):
    """Five-point central derivative, column per parameter; O(h^4)."""
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        f = lambda t: np.asarray(fn(p + t * e), dtype=float).ravel()
        cols.append((-f(2) + 8 * f(1) - 8 * f(-1) + f(-2)) / (12 * h))
    return np.column_stack(cols)


def smooth_image(rng, h=120, w=160, n_waves=8, blur=3.0):
    """Band-limited random texture; wavelengths >= about 4 blur lengths."""
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = np.full((h, w), 128.0)
    for _ in range(n_waves):
        lam = rng.uniform(4 * blur, 12 * blur)
        ang = rng.uniform(0, np.pi)
        k = 2 * np.pi / lam
        img += rng.uniform(5, 20) * np.sin(k * (np.cos(ang) * xx + np.sin(ang) * yy) + rng.uniform(0, 2 * np.pi))
    return Image(img)


def initial_pose_errors(n):
    """Rotation and translation-direction errors (degrees) of the noisy start over n trial seeds."""
    from jetpose.harness.experiment import preset, trial_motion
    from jetpose.harness.noise import DRIVING_NOISE, inject_noise
    from jetpose.geometry import intersection_angle, rodrigues_angle, rotation_from_angles, translation_from_polar
    cfg = preset("driving")
    rho, omega = [], []
    for seed in range(n):
        p_gt, _ = trial_motion(cfg, seed)
        p0, _ = inject_noise(p_gt, np.zeros((0, 2)), DRIVING_NOISE, np.random.default_rng([seed, 1]))
        rho.append(rodrigues_angle(rotation_from_angles(p0), rotation_from_angles(p_gt)))
        omega.append(intersection_angle(translation_from_polar(p0.alpha, p0.beta),
                                        translation_from_polar(p_gt.alpha, p_gt.beta)))
    return np.rad2deg(rho), np.rad2deg(omega)


def linear_problem(seed, scale=1.0, consistent=False):
    """12x4 linear least squares, scaled by ``scale``, with its exact solution."""
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(12, 4))
    d = M @ rng.normal(size=4) if consistent else rng.normal(size=12)
    prob = ResidualProblem(4, [ResidualBlock(lambda p: scale * (M @ p - d), lambda p: scale * M)])
    return prob, np.linalg.lstsq(M, d, rcond=None)[0]


def rosenbrock_problem():
    fn = lambda p: np.array([1 - p[0], 10 * (p[1] - p[0] ** 2)])
    jac = lambda p: np.array([[-1.0, 0.0], [-20 * p[0], 10.0]])
    return ResidualProblem(2, [ResidualBlock(fn, jac)])
