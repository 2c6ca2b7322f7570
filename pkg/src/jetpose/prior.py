"""Third-order linear motion predictor and the quadratic prior it induces."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import MotionParams, wrap_angle

ORDER = 3
N_PARAMS = 5
COV_FLOOR = 1e-12
FORMAT_HEADER = "# jetpose prior model v1"


class InsufficientData(ValueError):
    pass


class SingularCovariance(np.linalg.LinAlgError):
    pass


def _as_vec(p) -> np.ndarray:
    return p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float).reshape(N_PARAMS)


def param_difference(p, p_hat) -> np.ndarray:
    """p - p_hat with the angular difference wrapped to (-pi, pi]."""
    return wrap_angle(_as_vec(p) - _as_vec(p_hat))


@dataclass
class PoseSequence:
    """Consecutive relative motions.  ``breaks`` lists indices i where the step
    into params[i] does not follow params[i-1] (a skipped transition)."""

    params: list
    source: str = ""
    breaks: tuple = ()

    def __len__(self):
        return len(self.params)

    def as_array(self) -> np.ndarray:
        if not self.params:
            return np.zeros((0, N_PARAMS))
        return np.array([_as_vec(p) for p in self.params])


def _cholesky_of_inverse(C) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as e:
        raise SingularCovariance("covariance is not positive definite") from e
    # C = L L^T  =>  C^-1 = L^-T L^-1; upper factor W = L^-1 satisfies W^T W = C^-1
    return np.linalg.inv(L)


@dataclass
class MotionPrior:
    """Prediction p_hat with residual covariance C."""

    p_hat: np.ndarray
    cov: np.ndarray
    _w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.p_hat = _as_vec(self.p_hat).copy()
        self.cov = np.asarray(self.cov, dtype=float)
        self._w = _cholesky_of_inverse(self.cov)

    def whiten(self, p) -> np.ndarray:
        return self._w @ param_difference(p, self.p_hat)

    def whiten_matrix(self) -> np.ndarray:
        return self._w

    def quadratic(self, p) -> float:
        d = param_difference(p, self.p_hat)
        return float(d @ np.linalg.solve(self.cov, d))


@dataclass
class PriorModel:
    M: np.ndarray  # (5, 16): [p_{n-1}; p_{n-2}; p_{n-3}; 1] -> p_n
    C: np.ndarray
    n_samples: int = 0

    def predict(self, history) -> np.ndarray:
        """history: the three preceding parameter sets, most recent first."""
        if len(history) != ORDER:
            raise ValueError(f"need exactly {ORDER} history entries, got {len(history)}")
        z = np.concatenate([_as_vec(h) for h in history] + [[1.0]])
        return self.M @ z

    def prior_for(self, history) -> MotionPrior:
        return MotionPrior(self.predict(history), self.C)

    def save(self, path) -> None:
        lines = [FORMAT_HEADER, f"samples {self.n_samples}", "M 5 16"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.M]
        lines.append("C 5 5")
        lines += [" ".join(repr(float(v)) for v in row) for row in self.C]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PriorModel":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines or lines[0] != FORMAT_HEADER:
            raise ValueError(f"{path}: missing or unsupported prior model header")
        n = int(lines[1].split()[1])
        if lines[2] != "M 5 16" or lines[8] != "C 5 5":
            raise ValueError(f"{path}: malformed prior model")
        M = np.array([[float(v) for v in ln.split()] for ln in lines[3:8]])
        C = np.array([[float(v) for v in ln.split()] for ln in lines[9:14]])
        return cls(M, C, n)


def whiten(model, p, p_hat) -> np.ndarray:
    """C^{-1/2} (p - p_hat) for a PriorModel (or a bare covariance matrix)."""
    C = model.C if isinstance(model, PriorModel) else np.asarray(model, dtype=float)
    return _cholesky_of_inverse(C) @ param_difference(p, p_hat)


def regression_rows(seq) -> tuple[np.ndarray, np.ndarray]:
    """Rows [p_{n-1}; p_{n-2}; p_{n-3}; 1] -> p_n; windows spanning a break are dropped."""
    P = seq.as_array() if isinstance(seq, PoseSequence) else np.asarray(seq, dtype=float)
    if len(P) <= ORDER:
        return np.zeros((0, ORDER * N_PARAMS + 1)), np.zeros((0, N_PARAMS))
    X = np.column_stack([P[ORDER - 1 - j : len(P) - 1 - j] for j in range(ORDER)] + [np.ones(len(P) - ORDER)])
    Y = P[ORDER:]
    breaks = getattr(seq, "breaks", ())
    if breaks:
        n = np.arange(ORDER, len(P))
        keep = np.ones(len(n), bool)
        for b in breaks:
            keep &= ~((n - ORDER < b) & (b <= n))
        X, Y = X[keep], Y[keep]
    return X, Y


def fit_predictor(sequences: Sequence, ridge: float = 1e-8, min_samples: int = 50) -> PriorModel:
    """Ridge least squares of p_n on [p_{n-1}; p_{n-2}; p_{n-3}; 1]; the bias is not penalized."""
    rows = [regression_rows(s) for s in sequences]
    X = np.vstack([r[0] for r in rows])
    Y = np.vstack([r[1] for r in rows])
    if len(X) < min_samples:
        raise InsufficientData(f"{len(X)} usable transitions, need at least {min_samples}")
    d = X.shape[1]
    if ridge > 0:
        reg = np.sqrt(ridge) * np.eye(d)[: d - 1]
        Xa = np.vstack([X, reg])
        Ya = np.vstack([Y, np.zeros((d - 1, N_PARAMS))])
    else:
        Xa, Ya = X, Y
    B, *_ = np.linalg.lstsq(Xa, Ya, rcond=None)
    R = Y - X @ B
    C = R.T @ R / len(R) + COV_FLOOR * np.eye(N_PARAMS)
    return PriorModel(B.T.copy(), (C + C.T) / 2.0, len(X))


def difference_variances(seq) -> np.ndarray:
    """Per-component variance of frame-to-frame parameter changes p_n - p_{n-1}."""
    P = seq.as_array() if isinstance(seq, PoseSequence) else np.asarray(seq, dtype=float)
    return np.var(np.diff(P, axis=0), axis=0)
