"""Reprojection-error baseline: optional LK refinement, point-to-line pose fit,
then minimal correction of every match onto its epipolar line."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    CameraIntrinsics, MotionParams, epipolar_lines, fundamental_matrices, fundamental_matrix, project_to_lines,
)
from .image import FramePair, WeightKernel, gaussian_kernel, patch_systems, sample_patches, wssd_batch
from .jet import IterationRecord, SingularPriorCovariance, TooFewFeatures
from .prior import MotionPrior
from .solver import ResidualBlock, ResidualProblem, SolverOptions, solve_nlls
from .tracking import Status, inv2, regularize, well_conditioned

_LINE_EPS = 1e-12


@dataclass
class RpeConfig:
    xi_r: float = 0.0
    lk_prestep: bool = True
    lk_iters: int = 10
    kernel_side: int = 9
    kernel_sigma: float = 2.0
    solver: SolverOptions = field(default_factory=SolverOptions)
    min_active_features: int = 8
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.xi_r < 0:
            raise ValueError("xi_r must be non-negative")

    @property
    def kernel(self):
        return gaussian_kernel(self.kernel_side, self.kernel_sigma)


@dataclass
class RpeResult:
    p_opt: MotionParams
    ys: np.ndarray
    status: np.ndarray
    loss: float
    records: list
    ys_tracked: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return self.status == Status.ACTIVE


def lk_prestep(frames: FramePair, xs, ys, kernel: WeightKernel, iters: int = 10, status=None):
    """Plain per-feature Lucas-Kanade; a step is kept only if the exact WSSD drops.

    Returns (ys, status).  Features with an ill-conditioned patch are demoted
    and keep their position.
    """
    I, J = frames.I, frames.J
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.array(ys, dtype=float).reshape(-1, 2)
    status = np.zeros(len(xs), dtype=int) if status is None else np.array(status, dtype=int)
    Ip = sample_patches(I, xs, kernel)
    q, valid = wssd_batch(I, J, xs, ys - xs, kernel, Ip)
    status[(status == Status.ACTIVE) & ~valid] = Status.BORDER_INVALID
    moving = status == Status.ACTIVE
    for _ in range(iters):
        idx = np.flatnonzero(moving)
        if idx.size == 0:
            break
        s = patch_systems(I, J, xs[idx], ys[idx], kernel, Ip[idx])
        A = regularize(s.A)
        good = s.valid & well_conditioned(A)
        status[idx[~s.valid]] = Status.BORDER_INVALID
        status[idx[s.valid & ~good]] = Status.ILL_CONDITIONED
        moving[idx[~good]] = False
        idx, A, b = idx[good], A[good], s.b[good]
        v = -np.einsum("nij,nj->ni", inv2(A), b)
        y_try = ys[idx] + v
        q_try, ok = wssd_batch(I, J, xs[idx], y_try - xs[idx], kernel, Ip[idx])
        better = ok & (q_try < q[idx])
        ys[idx[better]] = y_try[better]
        q[idx[better]] = q_try[better]
        moving[idx[~better]] = False
    return ys, status


def _distances(Fs, xh, yh):
    """Signed point-to-line distances for a stack of F: (M, N) plus degenerate mask."""
    l = xh @ np.swapaxes(Fs, -1, -2)
    num = np.sum(yh * l, axis=-1)
    den = np.hypot(l[..., 0], l[..., 1])
    fn = np.sqrt(np.sum(Fs * Fs, axis=(-1, -2)))[..., None]
    ok = den >= _LINE_EPS * fn
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0), ok


def _vec(p):
    return p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float)


def rpe_loss(p, xs, ys, K: CameraIntrinsics, prior: Optional[MotionPrior] = None, xi_r: float = 0.0,
             mask=None, min_active: int = 8) -> float:
    """Mean squared point-to-line distance plus the prior quadratic."""
    if xi_r > 0 and prior is None:
        raise SingularPriorCovariance("a positive prior weight needs a prior")
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    mask = np.ones(len(xs), bool) if mask is None else np.asarray(mask, bool)
    xh = np.column_stack([xs[mask], np.ones(mask.sum())])
    yh = np.column_stack([ys[mask], np.ones(mask.sum())])
    d, ok = _distances(fundamental_matrices(_vec(p), K), xh, yh)
    if ok.sum() < min_active:
        raise TooFewFeatures(f"{int(ok.sum())} usable features, need {min_active}")
    loss = float(np.mean(d[0][ok[0]] ** 2))
    if xi_r > 0:
        loss += xi_r * prior.quadratic(p)
    return loss


def rpe_residuals(xs, ys, K: CameraIntrinsics, prior: Optional[MotionPrior] = None, xi_r: float = 0.0,
                  mask=None, fd_step: float = 1e-6) -> ResidualProblem:
    """Residual form: d_k / sqrt(N) per feature and sqrt(xi_r) C^{-1/2} (p - p_hat)."""
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    mask = np.ones(len(xs), bool) if mask is None else np.asarray(mask, bool)
    xh = np.column_stack([xs[mask], np.ones(mask.sum())])
    yh = np.column_stack([ys[mask], np.ones(mask.sum())])

    def res(q):
        d, ok = _distances(fundamental_matrices(q, K), xh, yh)
        return d[0] / np.sqrt(max(ok[0].sum(), 1))

    def jac(q):
        E = np.eye(5) * fd_step
        d, ok = _distances(fundamental_matrices(np.concatenate([q + E, q - E]), K), xh, yh)
        d = d / np.sqrt(np.maximum(ok.sum(axis=1), 1))[:, None]
        return ((d[:5] - d[5:]) / (2.0 * fd_step)).T

    blocks = [ResidualBlock(res, jac)]
    if xi_r > 0:
        if prior is None:
            raise SingularPriorCovariance("a positive prior weight needs a prior")
        Wp = np.sqrt(xi_r) * prior.whiten_matrix()
        blocks.append(ResidualBlock(lambda q: np.sqrt(xi_r) * prior.whiten(q), lambda q: Wp))
    return ResidualProblem(5, blocks)


def rpe_optimize(frames: FramePair, xs, ys, p0, config: RpeConfig | None = None,
                 prior: Optional[MotionPrior] = None, status=None) -> RpeResult:
    config = config or RpeConfig()
    if config.xi_r > 0 and prior is None:
        raise SingularPriorCovariance("a positive prior weight needs a prior")
    K = frames.K
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.array(ys, dtype=float).reshape(-1, 2)
    status = np.zeros(len(xs), dtype=int) if status is None else np.array(status, dtype=int)
    if config.lk_prestep:
        ys, status = lk_prestep(frames, xs, ys, config.kernel, config.lk_iters, status)
    tracked = ys.copy()
    active = status == Status.ACTIVE
    if active.sum() < config.min_active_features:
        raise TooFewFeatures(f"{int(active.sum())} active features, need {config.min_active_features}")

    p = _vec(p0).copy()
    problem = rpe_residuals(xs, ys, K, prior, config.xi_r, active, config.fd_step)
    rep = solve_nlls(problem, p, config.solver)
    p_opt = MotionParams.from_array(rep.p_opt)

    # Project with the same F that callers get from fundamental_matrix: lines of
    # features near the epipole are ill-conditioned, so a merely proportional F
    # would tilt them by round-off and leave the outputs ~1e-8 px off.
    F = fundamental_matrix(p_opt, K)
    lines = epipolar_lines(F, xs)
    degenerate = np.hypot(lines[:, 0], lines[:, 1]) < _LINE_EPS * np.linalg.norm(F)
    status[active & degenerate] = Status.EPIPOLE_DEGENERATE
    active = status == Status.ACTIVE
    out = ys.copy()
    out[active] = project_to_lines(ys[active], lines[active])
    loss = rep.final_cost
    rec = IterationRecord(0, loss, p_opt.as_array(), int(active.sum()), True, rep.initial_cost, rep.iterations,
                          rep.termination.value)
    return RpeResult(p_opt, out, status, loss, [rec], tracked)
