"""Evaluation measures: rotation error rho, translation-direction error Omega,
correspondence RMS and photometric SSD."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from ..geometry import MotionParams, intersection_angle, rodrigues_angle, rotation_from_angles, translation_from_polar
from ..image import FramePair, WeightKernel, wssd_batch

METHODS = ("JET", "RPE")


@dataclass(frozen=True)
class Measures:
    rho: float  # degrees
    omega: float  # degrees
    rms: float  # pixels
    ssd: float  # intensity^2
    n: int  # features entering RMS and SSD


def _vec(p):
    return p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float)


def measure(p, ys, p_gt, ys_gt, xs, frames: FramePair, kernel: WeightKernel, active=None) -> Measures:
    """All four measures; features outside ``active`` are excluded from RMS and SSD."""
    p, p_gt = _vec(p), _vec(p_gt)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    ys_gt = np.asarray(ys_gt, dtype=float).reshape(-1, 2)
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    if not (len(ys) == len(ys_gt) == len(xs)):
        raise ValueError("feature counts of result, ground truth and first-view points differ")
    active = np.ones(len(xs), bool) if active is None else np.asarray(active, bool)
    rho = np.rad2deg(rodrigues_angle(rotation_from_angles(p), rotation_from_angles(p_gt)))
    omega = np.rad2deg(intersection_angle(translation_from_polar(p[3], p[4]), translation_from_polar(p_gt[3], p_gt[4])))
    if not active.any():
        return Measures(float(rho), float(omega), float("nan"), float("nan"), 0)
    q, valid = wssd_batch(frames.I, frames.J, xs[active], ys[active] - xs[active], kernel)
    use = np.flatnonzero(active)[valid]
    n = len(use)
    if n == 0:
        return Measures(float(rho), float(omega), float("nan"), float("nan"), 0)
    d = ys[use] - ys_gt[use]
    rms = np.sqrt(np.mean(np.sum(d * d, axis=1)))
    return Measures(float(rho), float(omega), float(rms), float(np.mean(q[valid])), n)


@dataclass
class TrialRecord:
    """One method on one trial.  ``wall_time`` is informational and excluded from
    equality and from the results file so reruns stay byte-identical."""

    seed: int
    method: str
    prior: bool
    rho_in: float = float("nan")
    omega_in: float = float("nan")
    rms_in: float = float("nan")
    ssd_in: float = float("nan")
    rho: float = float("nan")
    omega: float = float("nan")
    rms: float = float("nan")
    ssd: float = float("nan")
    ssd_gt: float = float("nan")
    n_active: int = 0
    iterations: int = 0
    inner_iterations: int = 0
    failure: str = ""
    wall_time: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")

    @property
    def failed(self) -> bool:
        return bool(self.failure)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "wall_time"]

    @classmethod
    def from_measures(cls, seed, method, prior, initial: Measures, final: Measures, ssd_gt, **kw) -> "TrialRecord":
        return cls(seed, method, prior, initial.rho, initial.omega, initial.rms, initial.ssd,
                   final.rho, final.omega, final.rms, final.ssd, ssd_gt, final.n, **kw)


SUMMARY_METRICS = ("rho_in", "rho", "omega_in", "omega", "rms_in", "rms", "ssd", "ssd_gt")


def summarize(records) -> dict:
    """Per (method, prior) group: mean and standard deviation of each metric over
    successful trials, plus trial and failure counts."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.prior), []).append(r)
    out = {}
    for key, rs in sorted(groups.items()):
        ok = [r for r in rs if not r.failed]
        row = {"trials": len(rs), "failed": len(rs) - len(ok)}
        for m in SUMMARY_METRICS:
            vals = np.array([getattr(r, m) for r in ok], dtype=float)
            row[f"{m}_mean"] = float(np.mean(vals)) if len(vals) else float("nan")
            row[f"{m}_std"] = float(np.std(vals)) if len(vals) else float("nan")
        out[key] = row
    return out
