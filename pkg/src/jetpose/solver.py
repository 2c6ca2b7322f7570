"""Small dense Levenberg-Marquardt solver for stacked residual blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np


class NumericFailure(ArithmeticError):
    pass


class Termination(str, Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    STALLED = "Stalled"
    NUMERIC_FAILURE = "NumericFailure"


@dataclass
class ResidualBlock:
    """Maps parameters to an m-vector; ``jac`` (optional) returns the (m, n) Jacobian."""

    fn: Callable[[np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    fd_step: float = 1e-6


def finite_diff_jacobian(block, p, step=1e-6) -> np.ndarray:
    """Central differences; ``step`` may be a scalar or one value per parameter."""
    fn = block.fn if isinstance(block, ResidualBlock) else block
    p = np.asarray(p, dtype=float)
    steps = np.broadcast_to(np.asarray(step, dtype=float), p.shape)
    cols = []
    for i in range(p.size):
        dp = np.zeros_like(p)
        dp[i] = steps[i]
        rp = np.atleast_1d(np.asarray(fn(p + dp), dtype=float))
        rm = np.atleast_1d(np.asarray(fn(p - dp), dtype=float))
        cols.append((rp - rm) / (2.0 * steps[i]))
    return np.column_stack(cols)


class ResidualProblem:
    def __init__(self, n_params: int, blocks: Sequence[ResidualBlock]):
        self.n_params = int(n_params)
        self.blocks = list(blocks)
        self.evaluations = 0

    def residual(self, p) -> np.ndarray:
        self.evaluations += 1
        p = np.asarray(p, dtype=float)
        parts = [np.atleast_1d(np.asarray(b.fn(p), dtype=float)).ravel() for b in self.blocks]
        if len(parts) == 1:
            return parts[0]
        return np.concatenate(parts) if parts else np.zeros(0)

    def jacobian(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        parts = []
        for b in self.blocks:
            J = b.jac(p) if b.jac is not None else finite_diff_jacobian(b, p, b.fd_step)
            J = np.asarray(J, dtype=float).reshape(-1, self.n_params)
            parts.append(J)
        if len(parts) == 1:
            return parts[0]
        return np.vstack(parts) if parts else np.zeros((0, self.n_params))

    def cost(self, p) -> float:
        r = self.residual(p)
        return float(r @ r)


@dataclass
class SolverOptions:
    max_iters: int = 50
    gradient_tol: float = 1e-10
    step_tol: float = 1e-10
    initial_damping: float = 1e-4
    max_damping: float = 1e12


@dataclass
class SolveReport:
    p_opt: np.ndarray
    initial_cost: float
    final_cost: float
    iterations: int
    termination: Termination
    cost_trace: list = field(default_factory=list)
    evaluations: int = 0


def solve_nlls(problem: ResidualProblem, p0, opts: SolverOptions | None = None) -> SolveReport:
    """Minimize sum of squared residuals with multiplicative LM damping on diag(J^T J).

    Damping grows x10 on a rejected step and shrinks /3 on an accepted one.
    The iterate only changes on accepted (strictly cost-decreasing) steps.
    ``gradient_tol`` is relative to the gradient at ``p0`` so that a common
    scaling of all residuals leaves the returned point unchanged.
    """
    opts = opts or SolverOptions()
    p = np.array(p0, dtype=float).reshape(problem.n_params)
    r = problem.residual(p)
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals are not finite at the initial point")
    cost = float(r @ r)
    initial = cost
    trace = [cost]
    mu = opts.initial_damping
    accepted = 0
    reason = Termination.MAX_ITERATIONS

    def report(term):
        return SolveReport(p, initial, cost, accepted, term, trace, problem.evaluations)

    g_ref = None
    for _ in range(opts.max_iters):
        J = problem.jacobian(p)
        g = J.T @ r
        if not np.all(np.isfinite(g)):
            return report(Termination.NUMERIC_FAILURE)
        g_max = np.max(np.abs(g), initial=0.0)
        if g_ref is None:
            g_ref = g_max
        if g_max <= opts.gradient_tol * g_ref:
            reason = Termination.CONVERGED
            break
        H = J.T @ J
        d = np.diag(H).copy()
        d = np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1e-300))
        while True:
            if mu > opts.max_damping:
                return report(Termination.STALLED)
            M = H + mu * np.diag(d)
            try:
                np.linalg.cholesky(M)  # positive definiteness check
            except np.linalg.LinAlgError:
                mu *= 10.0
                if mu > opts.max_damping:
                    return report(Termination.NUMERIC_FAILURE)
                continue
            step = -np.linalg.solve(M, g)
            if math.sqrt(step @ step) < opts.step_tol * (math.sqrt(p @ p) + opts.step_tol):
                return report(Termination.CONVERGED)
            p_new = p + step
            r_new = problem.residual(p_new)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                p, r, cost = p_new, r_new, cost_new
                trace.append(cost)
                accepted += 1
                mu /= 3.0
                break
            mu *= 10.0
    return report(reason)
