"""Per-feature displacement solves.

The constrained step minimizes ``v^T A v + 2 v^T b`` subject to the epipolar
constraint ``(y + v; 1)^T F (x; 1) = 0``.  Its stationarity conditions form the
symmetric bordered system

    [ A    g ] [ v ]   [ -b  ]
    [ g^T  0 ] [ l ] = [ -r0 ]      g = F'(x;1),  r0 = (y;1)^T F (x;1)

which is eliminated in closed form.  ``f_k(p)`` is that step as a function of
the motion parameters through ``F(p)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .geometry import CameraIntrinsics, MotionParams, fundamental_jacobian, fundamental_matrices, fundamental_matrix
from .image import PatchSystem

MAX_CONDITION = 1e8
REG_FACTOR = 1e-6
EPIPOLE_EPS = 1e-12


class TrackingError(ArithmeticError):
    pass


class IllConditioned(TrackingError):
    pass


class EpipoleDegenerate(TrackingError):
    pass


class Status(IntEnum):
    ACTIVE = 0
    BORDER_INVALID = 1
    EPIPOLE_DEGENERATE = 2
    ILL_CONDITIONED = 3


@dataclass
class Correspondence:
    x: np.ndarray
    y: np.ndarray
    status: Status = Status.ACTIVE


@dataclass
class ConstrainedStep:
    v: np.ndarray
    lam: float
    kkt_residual: float


def regularize(A):
    """A + eps*I with eps = 1e-6 * trace(A) / 2; works on (2,2) or (N,2,2)."""
    A = np.asarray(A, dtype=float)
    eps = REG_FACTOR * (A[..., 0, 0] + A[..., 1, 1]) / 2.0
    out = A.copy()
    out[..., 0, 0] += eps
    out[..., 1, 1] += eps
    return out


def sym2_eigvals(A):
    """Eigenvalues (lo, hi) of symmetric 2x2 matrices."""
    A = np.asarray(A, dtype=float)
    a, b, c = A[..., 0, 0], A[..., 0, 1], A[..., 1, 1]
    m = (a + c) / 2.0
    r = np.hypot((a - c) / 2.0, b)
    return m - r, m + r


def condition_number(A):
    lo, hi = sym2_eigvals(A)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.inf)
    return cond if np.ndim(cond) else float(cond)


def well_conditioned(A):
    return condition_number(A) <= MAX_CONDITION


def inv2(A):
    """Closed-form inverse of (..., 2, 2) matrices."""
    A = np.asarray(A, dtype=float)
    a, b, c, d = A[..., 0, 0], A[..., 0, 1], A[..., 1, 0], A[..., 1, 1]
    det = a * d - b * c
    out = np.empty_like(A)
    out[..., 0, 0] = d / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -c / det
    out[..., 1, 1] = a / det
    return out


def sqrt_psd2(A):
    """Symmetric square root of PSD 2x2 matrices: (A + sqrt(det) I) / sqrt(tr + 2 sqrt(det))."""
    A = np.asarray(A, dtype=float)
    det = np.maximum(A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0], 0.0)
    s = np.sqrt(det)
    t = np.sqrt(np.maximum(A[..., 0, 0] + A[..., 1, 1] + 2.0 * s, 0.0))
    t = np.where(t > 0, t, 1.0)
    out = A.copy()
    out[..., 0, 0] += s
    out[..., 1, 1] += s
    return out / t[..., None, None]


def lk_step(A, b) -> np.ndarray:
    """Unconstrained minimizer -A^-1 b of the patch model."""
    A = np.asarray(A, dtype=float)
    if not well_conditioned(A):
        raise IllConditioned(f"patch matrix condition {condition_number(A):.3g} exceeds {MAX_CONDITION:g}")
    return -inv2(A) @ np.asarray(b, dtype=float)


def _hom(x):
    return np.array([x[0], x[1], 1.0])


def lk_step_constrained(A, b, x_k, y_k, F) -> ConstrainedStep:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    F = np.asarray(F, dtype=float)
    if not well_conditioned(A):
        raise IllConditioned(f"patch matrix condition {condition_number(A):.3g} exceeds {MAX_CONDITION:g}")
    l = F @ _hom(x_k)
    g = l[:2]
    if np.hypot(*g) < EPIPOLE_EPS * np.linalg.norm(F):
        raise EpipoleDegenerate("feature lies on the epipole")
    r0 = _hom(y_k) @ l
    Ai = inv2(A)
    u = Ai @ b
    Hg = Ai @ g
    denom = g @ Hg
    if not denom > 0:
        raise IllConditioned("bordered system is singular")
    lam = (r0 - g @ u) / denom
    v = -u - lam * Hg
    kkt = float(np.linalg.norm(A @ v + b + lam * g))
    return ConstrainedStep(v, float(lam), kkt)


def displacement_f(p, K: CameraIntrinsics, patch: PatchSystem, x_k, y_k) -> ConstrainedStep:
    return lk_step_constrained(patch.A, patch.b, x_k, y_k, fundamental_matrix(p, K))


def jacobian_f(p, K: CameraIntrinsics, patch: PatchSystem, x_k, y_k, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian (2, 5) of f_k with respect to the motion parameters."""
    p = p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float)
    J = np.empty((2, 5))
    for i in range(5):
        dp = np.zeros(5)
        dp[i] = step
        vp = lk_step_constrained(patch.A, patch.b, x_k, y_k, fundamental_matrices(p + dp, K)[0]).v
        vm = lk_step_constrained(patch.A, patch.b, x_k, y_k, fundamental_matrices(p - dp, K)[0]).v
        J[:, i] = (vp - vm) / (2.0 * step)
    return J


class ConstrainedDisplacements:
    """Vectorized f_k(p) over all features for fixed patch systems.

    ``A`` should already be regularized.  Features with ``mask`` False are
    carried along but never reported as solvable.
    """

    def __init__(self, A, b, xs, ys, K: CameraIntrinsics, mask=None):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.K = K
        n = len(self.xs)
        self.mask = np.ones(n, bool) if mask is None else np.asarray(mask, bool).copy()
        self.mask &= well_conditioned(self.A)
        Asafe = np.where(self.mask[:, None, None], self.A, np.eye(2))
        self.Ainv = inv2(Asafe)
        self.u = np.einsum("nij,nj->ni", self.Ainv, self.b)
        self.xh = np.column_stack([self.xs, np.ones(n)])
        self.yh = np.column_stack([self.ys, np.ones(n)])
        # contiguous per-feature constants for the hot loop; Ainv is symmetric
        self._xt = np.ascontiguousarray(self.xh.T)
        self._h = [np.ascontiguousarray(self.Ainv[:, i, j]) for i, j in ((0, 0), (0, 1), (1, 1))]
        self._z = [np.ascontiguousarray(self.ys[:, i] - self.u[:, i]) for i in (0, 1)]
        self._nu = [np.ascontiguousarray(-self.u[:, i]) for i in (0, 1)]

    def solve(self, F):
        """Constrained steps for one F (3,3) or a stack (M,3,3).

        Returns (v, lam, ok) with shapes (..., N, 2), (..., N), (..., N).
        """
        F = np.asarray(F, dtype=float)
        L = F @ self._xt  # (..., 3, N) epipolar lines
        g0, g1 = L[..., 0, :], L[..., 1, :]
        h00, h01, h11 = self._h
        Hg0 = h00 * g0 + h01 * g1
        Hg1 = h01 * g0 + h11 * g1
        denom = g0 * Hg0 + g1 * Hg1
        # r0 - g.u = l . (y - u; 1)
        num = g0 * self._z[0] + g1 * self._z[1] + L[..., 2, :]
        fn2 = np.sum(F * F, axis=(-1, -2))[..., None] * EPIPOLE_EPS**2
        ok = self.mask & (g0 * g0 + g1 * g1 >= fn2) & (denom > 0)
        lam = np.where(ok, num / np.where(ok, denom, 1.0), 0.0)
        v = np.stack([self._nu[0] - lam * Hg0, self._nu[1] - lam * Hg1], axis=-1)
        return v, lam, ok

    def displacements(self, p):
        p = p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float)
        return self.solve(fundamental_matrices(p, self.K)[0])

    def jacobian(self, p):
        """Exact df_k/dp: (N, 2, 5) plus the per-feature ok mask at p.

        f_k depends on p only through the line l = F (x;1), so the chain rule
        runs through the closed-form constrained step and dF/dp.
        """
        F, dF = fundamental_jacobian(p, self.K)
        v, lam, ok = self.solve(F)
        x0, x1 = self.xh[:, 0], self.xh[:, 1]
        g0 = F[0, 0] * x0 + F[0, 1] * x1 + F[0, 2]
        g1 = F[1, 0] * x0 + F[1, 1] * x1 + F[1, 2]
        h00, h01, h11 = self.Ainv[:, 0, 0], self.Ainv[:, 0, 1], self.Ainv[:, 1, 1]
        Hg0 = h00 * g0 + h01 * g1
        Hg1 = h01 * g0 + h11 * g1
        den = np.where(ok, g0 * Hg0 + g1 * Hg1, 1.0)
        z0 = self.yh[:, 0] - self.u[:, 0]
        z1 = self.yh[:, 1] - self.u[:, 1]
        D = dF[:, None, :, :]  # (5, 1, 3, 3)
        d0 = D[..., 0, 0] * x0 + D[..., 0, 1] * x1 + D[..., 0, 2]
        d1 = D[..., 1, 0] * x0 + D[..., 1, 1] * x1 + D[..., 1, 2]
        d2 = D[..., 2, 0] * x0 + D[..., 2, 1] * x1 + D[..., 2, 2]
        dnum = d0 * z0 + d1 * z1 + d2
        dden = 2.0 * (Hg0 * d0 + Hg1 * d1)
        dlam = (dnum - lam * dden) / den
        J0 = -dlam * Hg0 - lam * (h00 * d0 + h01 * d1)
        J1 = -dlam * Hg1 - lam * (h01 * d0 + h11 * d1)
        J = np.stack([J0.T, J1.T], axis=1)  # (N, 2, 5)
        J[~ok] = 0.0
        return J, ok

    def jacobian_fd(self, p, step: float = 1e-6):
        """Central-difference df_k/dp, kept as an independent check of ``jacobian``."""
        p = p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float)
        E = np.eye(5) * step
        stencil = np.concatenate([p + E, p - E])
        v, _, ok = self.solve(fundamental_matrices(stencil, self.K))
        J = (v[:5] - v[5:]) / (2.0 * step)  # (5, N, 2)
        return np.transpose(J, (1, 2, 0)), np.all(ok, axis=0)
