"""Unscaled two-view pose parametrization and epipolar geometry.

Pose convention: a point with coordinates ``X1`` in the first camera frame has
coordinates ``X2 = R @ X1 - s * t`` in the second frame, where ``s > 0`` is the
unobservable scale and ``t`` the unit direction of camera motion expressed in
the second frame.  ``F = K^-T [t]x R K^-1`` then satisfies
``(y;1)^T F (x;1) = 0`` for a point ``x`` in image I and ``y`` in image J.
Flipping the sign of ``t`` only flips the sign of ``F``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


class DegenerateTranslation(GeometryError):
    pass


class DegenerateLine(GeometryError):
    pass


class NotARotation(GeometryError):
    pass


class ZeroVector(GeometryError):
    pass


_LINE_EPS = 1e-12


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if w.ndim else float(w)


@dataclass(frozen=True)
class MotionParams:
    """Minimal unscaled relative pose (pitch, yaw, roll, azimuth, elevation), radians."""

    theta: float
    psi: float
    phi: float
    alpha: float
    beta: float

    def __post_init__(self):
        vals = (self.theta, self.psi, self.phi, self.alpha, self.beta)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite motion parameters: {vals}")
        for name in ("theta", "psi", "phi"):
            object.__setattr__(self, name, float(wrap_angle(getattr(self, name))))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))

    @classmethod
    def from_array(cls, p) -> "MotionParams":
        p = np.asarray(p, dtype=float).reshape(5)
        return cls(*p)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.psi, self.phi, self.alpha, self.beta])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_angles(self)

    @property
    def translation(self) -> np.ndarray:
        return translation_from_polar(self.alpha, self.beta)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise ValueError("intrinsics must be finite")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def project(self, X) -> np.ndarray:
        """Project camera-frame points (..., 3) to pixels (..., 2)."""
        X = np.asarray(X, dtype=float)
        z = X[..., 2]
        return np.stack([self.fx * X[..., 0] / z + self.cx, self.fy * X[..., 1] / z + self.cy], axis=-1)

    def backproject(self, uv) -> np.ndarray:
        """Viewing rays with unit depth for pixels (..., 2)."""
        uv = np.asarray(uv, dtype=float)
        return np.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy, np.ones(uv.shape[:-1])],
            axis=-1,
        )


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_angles(p) -> np.ndarray:
    """R = Rz(phi) @ Ry(psi) @ Rx(theta)."""
    if isinstance(p, MotionParams):
        theta, psi, phi = p.theta, p.psi, p.phi
    else:
        theta, psi, phi = np.asarray(p, dtype=float)[:3]
    return _rz(phi) @ _ry(psi) @ _rx(theta)


def angles_from_rotation(R) -> tuple[float, float, float]:
    """Inverse of rotation_from_angles, returning (theta, psi, phi)."""
    R = np.asarray(R, dtype=float)
    theta = np.arctan2(R[2, 1], R[2, 2])
    psi = np.arctan2(-R[2, 0], np.hypot(R[2, 1], R[2, 2]))
    phi = np.arctan2(R[1, 0], R[0, 0])
    return float(theta), float(psi), float(phi)


def translation_from_polar(alpha, beta) -> np.ndarray:
    """Unit direction; (0, 0) is forward along the optical axis, alpha > 0 to the right."""
    cb = np.cos(beta)
    return np.array([cb * np.sin(alpha), np.sin(beta), cb * np.cos(alpha)])


def polar_from_translation(t) -> tuple[float, float]:
    t = np.asarray(t, dtype=float)
    n = np.linalg.norm(t)
    if not n > 0:
        raise ZeroVector("translation has zero length")
    t = t / n
    beta = np.arcsin(np.clip(t[1], -1.0, 1.0))
    alpha = np.arctan2(t[0], t[2])
    return float(alpha), float(beta)


def motion_from_pose(R, t) -> MotionParams:
    alpha, beta = polar_from_translation(t)
    return MotionParams(*angles_from_rotation(R), alpha, beta)


def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def normalize_fundamental(F) -> np.ndarray:
    """Frobenius norm 1, largest-magnitude entry positive."""
    F = np.asarray(F, dtype=float)
    n = np.linalg.norm(F)
    if not n > 1e-300:
        raise DegenerateTranslation("fundamental matrix vanishes")
    F = F / n
    if F.flat[np.argmax(np.abs(F))] < 0:
        F = -F
    return F


def fundamental_from_pose(R, t, K: CameraIntrinsics, normalize=True) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.linalg.norm(t) < 1e-300:
        raise DegenerateTranslation("translation magnitude underflows")
    Ki = K.K_inv
    F = Ki.T @ skew(t) @ np.asarray(R, dtype=float) @ Ki
    return normalize_fundamental(F) if normalize else F


def fundamental_matrix(p, K: CameraIntrinsics) -> np.ndarray:
    if not isinstance(p, MotionParams):
        p = MotionParams.from_array(p)
    return fundamental_from_pose(rotation_from_angles(p), translation_from_polar(p.alpha, p.beta), K)


def fundamental_matrices(ps, K: CameraIntrinsics) -> np.ndarray:
    """Unnormalized F for a stack of raw parameter vectors (M, 5) -> (M, 3, 3).

    Skips wrapping and normalization; used on finite-difference stencils where
    only the epipolar lines (scale free) matter.
    """
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    Ki = K.K_inv
    if len(ps) == 1:  # scalar fast path, same formula
        th, ps_, ph, al, be = ps[0].tolist()
        R = _rz(ph) @ _ry(ps_) @ _rx(th)
        cb = math.cos(be)
        return (Ki.T @ skew([cb * math.sin(al), math.sin(be), cb * math.cos(al)]) @ R @ Ki)[None]
    th, ps_, ph, al, be = ps.T
    cx_, sx_ = np.cos(th), np.sin(th)
    cy_, sy_ = np.cos(ps_), np.sin(ps_)
    cz_, sz_ = np.cos(ph), np.sin(ph)
    M = len(ps)
    R = np.empty((M, 3, 3))
    R[:, 0, 0] = cz_ * cy_
    R[:, 0, 1] = cz_ * sy_ * sx_ - sz_ * cx_
    R[:, 0, 2] = cz_ * sy_ * cx_ + sz_ * sx_
    R[:, 1, 0] = sz_ * cy_
    R[:, 1, 1] = sz_ * sy_ * sx_ + cz_ * cx_
    R[:, 1, 2] = sz_ * sy_ * cx_ - cz_ * sx_
    R[:, 2, 0] = -sy_
    R[:, 2, 1] = cy_ * sx_
    R[:, 2, 2] = cy_ * cx_
    cb = np.cos(be)
    t = np.stack([cb * np.sin(al), np.sin(be), cb * np.cos(al)], axis=-1)
    T = np.zeros((M, 3, 3))
    T[:, 0, 1], T[:, 0, 2] = -t[:, 2], t[:, 1]
    T[:, 1, 0], T[:, 1, 2] = t[:, 2], -t[:, 0]
    T[:, 2, 0], T[:, 2, 1] = -t[:, 1], t[:, 0]
    return Ki.T @ T @ R @ Ki


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def fundamental_jacobian(p, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized F (as in ``fundamental_matrices``) and its exact derivatives
    dF/dp_i stacked as (5, 3, 3) in parameter order (theta, psi, phi, alpha, beta)."""
    th, ps_, ph, al, be = p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float)
    Rx, Ry, Rz = _rx(th), _ry(ps_), _rz(ph)
    R = Rz @ Ry @ Rx
    dR = [Rz @ Ry @ _drx(th), Rz @ _dry(ps_) @ Rx, _drz(ph) @ Ry @ Rx]
    cb, sb, ca, sa = np.cos(be), np.sin(be), np.cos(al), np.sin(al)
    t = np.array([cb * sa, sb, cb * ca])
    dt_a = np.array([cb * ca, 0.0, -cb * sa])
    dt_b = np.array([-sb * sa, cb, -sb * ca])
    Ki = K.K_inv
    T = skew(t)
    F = Ki.T @ T @ R @ Ki
    dF = np.empty((5, 3, 3))
    for i in range(3):
        dF[i] = Ki.T @ T @ dR[i] @ Ki
    dF[3] = Ki.T @ skew(dt_a) @ R @ Ki
    dF[4] = Ki.T @ skew(dt_b) @ R @ Ki
    return F, dF


def epipoles(F) -> tuple[np.ndarray, np.ndarray]:
    """Right and left null vectors of F (homogeneous, unit norm): F e = 0, e'^T F = 0."""
    U, _, Vt = np.linalg.svd(np.asarray(F, dtype=float))
    return Vt[-1], U[:, -1]


@dataclass(frozen=True)
class EpipolarLine:
    l0: float
    l1: float
    l2: float

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([self.l0, self.l1, self.l2])

    @property
    def degenerate(self) -> bool:
        return bool(np.hypot(self.l0, self.l1) < _LINE_EPS)


def _h(x):
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def epipolar_line(F, x) -> EpipolarLine:
    return EpipolarLine(*(np.asarray(F, dtype=float) @ _h(x)))


def epipolar_lines(F, xs) -> np.ndarray:
    """Lines F (x;1) for points (N, 2) -> (N, 3)."""
    return _h(xs) @ np.asarray(F, dtype=float).T


def point_line_distance(y, x, F) -> float:
    """Signed distance of y to the epipolar line of x, in pixels."""
    l = np.asarray(F, dtype=float) @ _h(x)
    n = np.hypot(l[0], l[1])
    if n < _LINE_EPS:
        raise DegenerateLine("point coincides with the epipole")
    return float(_h(y) @ l / n)


def point_line_distances(ys, xs, F) -> np.ndarray:
    """Vectorized signed distances; NaN where the line degenerates."""
    l = epipolar_lines(F, xs)
    n = np.hypot(l[:, 0], l[:, 1])
    num = np.einsum("ij,ij->i", _h(ys), l)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n < _LINE_EPS, np.nan, num / np.where(n < _LINE_EPS, 1.0, n))


def project_to_line(y, l) -> np.ndarray:
    """Closest point on line l to y."""
    if isinstance(l, EpipolarLine):
        l = l.coeffs
    l0, l1, l2 = np.asarray(l, dtype=float)
    n2 = l0 * l0 + l1 * l1
    if n2 < _LINE_EPS**2:
        raise DegenerateLine("cannot project onto a degenerate line")
    y0, y1 = np.asarray(y, dtype=float)
    return np.array(
        [
            (y0 * l1 * l1 - y1 * l0 * l1 - l0 * l2) / n2,
            (-y0 * l0 * l1 + y1 * l0 * l0 - l1 * l2) / n2,
        ]
    )


def project_to_lines(ys, ls) -> np.ndarray:
    """Vectorized project_to_line; degenerate lines leave the point unchanged."""
    ys = np.asarray(ys, dtype=float)
    l0, l1, l2 = np.asarray(ls, dtype=float).T
    n2 = l0 * l0 + l1 * l1
    bad = n2 < _LINE_EPS**2
    n2 = np.where(bad, 1.0, n2)
    y0, y1 = ys[:, 0], ys[:, 1]
    out = np.stack(
        [(y0 * l1 * l1 - y1 * l0 * l1 - l0 * l2) / n2, (-y0 * l0 * l1 + y1 * l0 * l0 - l1 * l2) / n2], axis=-1
    )
    out[bad] = ys[bad]
    return out


def _check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise NotARotation("matrix is not a proper rotation")
    return R


def rodrigues_angle(R_est, R_gt) -> float:
    """Angle of R_gt @ R_est^T, radians in [0, pi]."""
    R_rel = _check_rotation(R_gt) @ _check_rotation(R_est).T
    c = (np.trace(R_rel) - 1.0) / 2.0
    # sin from the skew part keeps precision for tiny angles where arccos does not
    w = np.array([R_rel[2, 1] - R_rel[1, 2], R_rel[0, 2] - R_rel[2, 0], R_rel[1, 0] - R_rel[0, 1]])
    return float(np.arctan2(np.linalg.norm(w) / 2.0, np.clip(c, -1.0, 1.0)))


def intersection_angle(t_est, t_gt) -> float:
    a = np.asarray(t_est, dtype=float)
    b = np.asarray(t_gt, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("direction vector has zero length")
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))
