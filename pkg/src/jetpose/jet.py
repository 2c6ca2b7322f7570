"""Joint epipolar tracking: pose and correspondences from one photometric loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, MotionParams
from .image import FramePair, PatchSystems, gaussian_kernel, patch_systems, sample_patches, wssd_batch
from .prior import MotionPrior
from .solver import ResidualBlock, ResidualProblem, SolverOptions, solve_nlls
from .tracking import ConstrainedDisplacements, Status, regularize, sqrt_psd2, well_conditioned


class TooFewFeatures(RuntimeError):
    pass


class SingularPriorCovariance(ValueError):
    pass


@dataclass
class JetConfig:
    xi_q: float = 0.0
    max_outer_iters: int = 10
    kernel_side: int = 9
    kernel_sigma: float = 2.0
    solver: SolverOptions = field(default_factory=SolverOptions)
    min_active_features: int = 8
    jacobian_step: float = 1e-6
    check_vertex_form: bool = False

    def __post_init__(self):
        if self.xi_q < 0:
            raise ValueError("xi_q must be non-negative")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be at least 1")
        if self.min_active_features < 8:
            raise ValueError("min_active_features must be at least 8")

    @property
    def kernel(self):
        return gaussian_kernel(self.kernel_side, self.kernel_sigma)


@dataclass
class IterationRecord:
    """Diagnostics of one outer iteration (shared schema with the RPE baseline)."""

    iteration: int
    loss: float
    p: np.ndarray
    n_active: int
    accepted: bool
    reference_loss: float = float("nan")
    inner_iterations: int = 0
    termination: str = ""


@dataclass
class JetResult:
    p_opt: MotionParams
    ys: np.ndarray
    status: np.ndarray
    losses: list
    accepted_iterations: int
    records: list
    initial_loss: float

    @property
    def active(self) -> np.ndarray:
        return self.status == Status.ACTIVE


def _check_prior(prior, xi):
    if xi > 0 and prior is None:
        raise SingularPriorCovariance("a positive prior weight needs a prior")


def _prepare(systems: PatchSystems, xs, ys, K, mask, min_active):
    mask = systems.valid.copy() if mask is None else np.asarray(mask, bool) & systems.valid
    model = ConstrainedDisplacements(regularize(systems.A), systems.b, xs, ys, K, mask)
    if int(model.mask.sum()) < min_active:
        raise TooFewFeatures(f"{int(model.mask.sum())} active features, need {min_active}")
    return model


def joint_loss(p, systems: PatchSystems, xs, ys, K: CameraIntrinsics, prior: Optional[MotionPrior] = None,
               xi_q: float = 0.0, mask=None, min_active: int = 8) -> float:
    """(1/N) sum_k Q~_k(f_k(p)) + xi_q (p - p_hat)^T C^-1 (p - p_hat), N = active count."""
    _check_prior(prior, xi_q)
    model = _prepare(systems, xs, ys, K, mask, min_active)
    v, _, ok = model.displacements(p)
    ok &= model.mask
    A = model.A[ok]
    v = v[ok]
    q = np.einsum("ni,nij,nj->n", v, A, v) + 2.0 * np.sum(v * systems.b[ok], axis=1) + systems.c[ok]
    loss = float(q.mean())
    if xi_q > 0:
        loss += xi_q * prior.quadratic(p)
    return loss


def build_residuals(p, systems: PatchSystems, xs, ys, K: CameraIntrinsics, prior: Optional[MotionPrior] = None,
                    xi_q: float = 0.0, mask=None, min_active: int = 8,
                    jacobian_step: float = 1e-6) -> tuple[ResidualProblem, float]:
    """Vertex form: returns the problem and the constant with sum ||q||^2 + const = joint_loss."""
    _check_prior(prior, xi_q)
    model = _prepare(systems, xs, ys, K, mask, min_active)
    p0 = p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float)
    _, _, ok0 = model.displacements(p0)
    active = model.mask & ok0
    n = int(active.sum())
    if n < min_active:
        raise TooFewFeatures(f"{n} active features, need {min_active}")
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    sub = ConstrainedDisplacements(model.A[active], model.b[active], xs[active], ys[active], K)
    S = sqrt_psd2(sub.A) / np.sqrt(n)
    s00, s01, s11 = S[:, 0, 0].copy(), S[:, 0, 1].copy(), S[:, 1, 1].copy()
    u0, u1 = sub.u[:, 0].copy(), sub.u[:, 1].copy()
    const = float(np.mean(systems.c[active] - np.sum(sub.b * sub.u, axis=1))) if n else 0.0

    def image_res(q):
        v, _, ok = sub.displacements(q)
        w0 = v[:, 0] + u0
        w1 = v[:, 1] + u1
        r = np.empty((n, 2))
        r[:, 0] = np.where(ok, s00 * w0 + s01 * w1, 0.0)
        r[:, 1] = np.where(ok, s01 * w0 + s11 * w1, 0.0)
        return r.ravel()

    def image_jac(q):
        Jf, ok = sub.jacobian(q) if jacobian_step is None else sub.jacobian_fd(q, jacobian_step)
        ok = ok[:, None]
        Jq = np.empty((n, 2, 5))
        Jq[:, 0] = np.where(ok, s00[:, None] * Jf[:, 0] + s01[:, None] * Jf[:, 1], 0.0)
        Jq[:, 1] = np.where(ok, s01[:, None] * Jf[:, 0] + s11[:, None] * Jf[:, 1], 0.0)
        return Jq.reshape(-1, 5)

    blocks = [ResidualBlock(image_res, image_jac)]
    if xi_q > 0:
        Wp = np.sqrt(xi_q) * prior.whiten_matrix()
        blocks.append(ResidualBlock(lambda q: np.sqrt(xi_q) * prior.whiten(q), lambda q: Wp))
    problem = ResidualProblem(5, blocks)
    problem.active = active
    return problem, const


def jet_optimize(frames: FramePair, xs, ys, p0, config: JetConfig | None = None,
                 prior: Optional[MotionPrior] = None, status=None) -> JetResult:
    """Alternate pose solves on the linearized joint loss with re-linearization at the
    corrected correspondences, keeping an iteration only if the exact loss drops."""
    config = config or JetConfig()
    _check_prior(prior, config.xi_q)
    kernel = config.kernel
    I, J, K = frames.I, frames.J, frames.K
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.array(ys, dtype=float).reshape(-1, 2)
    n = len(xs)
    status = np.zeros(n, dtype=int) if status is None else np.array(status, dtype=int)
    p = (p0.as_array() if isinstance(p0, MotionParams) else np.asarray(p0, dtype=float)).copy()
    minimum = config.min_active_features

    Ip = sample_patches(I, xs, kernel)
    q0, valid0 = wssd_batch(I, J, xs, ys - xs, kernel, Ip)
    status[(status == Status.ACTIVE) & ~valid0] = Status.BORDER_INVALID
    initial_loss = float(np.mean(q0[status == Status.ACTIVE])) if np.any(status == Status.ACTIVE) else float("nan")

    losses, records = [], []
    q_state = None
    for it in range(config.max_outer_iters):
        active = status == Status.ACTIVE
        systems = patch_systems(I, J, xs, ys, kernel, Ip)
        status[active & ~systems.valid] = Status.BORDER_INVALID
        A_reg = regularize(systems.A)
        status[(status == Status.ACTIVE) & ~well_conditioned(A_reg)] = Status.ILL_CONDITIONED
        idx = np.flatnonzero(status == Status.ACTIVE)
        _, _, ok = ConstrainedDisplacements(A_reg[idx], systems.b[idx], xs[idx], ys[idx], K).displacements(p)
        status[idx[~ok]] = Status.EPIPOLE_DEGENERATE
        active = status == Status.ACTIVE
        if active.sum() < minimum:
            raise TooFewFeatures(f"{int(active.sum())} active features, need {minimum}")
        idx = np.flatnonzero(active)
        model = ConstrainedDisplacements(A_reg[idx], systems.b[idx], xs[idx], ys[idx], K)

        problem, const = build_residuals(p, systems, xs, ys, K, prior, config.xi_q, active, minimum,
                                         config.jacobian_step)
        rep = solve_nlls(problem, p, config.solver)
        p_new = MotionParams.from_array(rep.p_opt).as_array()
        if config.check_vertex_form:
            lin = joint_loss(p_new, systems, xs, ys, K, prior, config.xi_q, active, minimum)
            vert = problem.cost(p_new) + const
            assert abs(vert - lin) <= 1e-6 * (1.0 + abs(lin)), (vert, lin)

        v, _, ok = model.displacements(p_new)
        new_status = status.copy()
        new_status[idx[~ok]] = Status.EPIPOLE_DEGENERATE
        ys_new = ys.copy()
        ys_new[idx[ok]] += v[ok]
        moved = new_status == Status.ACTIVE
        q_new, valid = wssd_batch(I, J, xs, ys_new - xs, kernel, Ip)
        new_status[moved & ~valid] = Status.BORDER_INVALID
        keep = new_status == Status.ACTIVE
        if keep.sum() < minimum:
            raise TooFewFeatures(f"{int(keep.sum())} active features, need {minimum}")
        loss = float(np.mean(q_new[keep]))
        # The exact loss is only defined on epipolar-conform states, so the first
        # iteration establishes it; later ones must lower it on the common feature set.
        ref = float(np.mean(q_state[keep])) if q_state is not None else float("nan")
        accepted = q_state is None or loss < ref
        records.append(IterationRecord(it, loss, p_new.copy(), int(keep.sum()), accepted, ref,
                                       rep.iterations, rep.termination.value))
        if not accepted:
            break
        p, ys, status, q_state = p_new, ys_new, new_status, q_new
        losses.append(loss)

    return JetResult(MotionParams.from_array(p), ys, status, losses, len(losses), records, initial_loss)
