"""Synthetic frame-to-frame motion sequences with car-like or handheld dynamics."""

from __future__ import annotations

import numpy as np

from ..geometry import MotionParams
from ..prior import PoseSequence

_DEG = np.pi / 180.0


def driving_sequence(n: int, seed: int, noise_scale: float = 1.0) -> PoseSequence:
    """Correlated driving motion: smooth steering, damped pitch/roll oscillation,
    translation heading following half the yaw.  Angles in radians."""
    rng = np.random.default_rng(seed)
    s = noise_scale * _DEG
    burn = 200
    m = n + burn
    w = rng.standard_normal((m, 5))
    psi = np.zeros(m)
    steer = np.zeros(m)
    theta = np.zeros(m)
    phi = np.zeros(m)
    for i in range(2, m):
        steer[i] = 0.85 * steer[i - 1] + 0.02 * s * w[i, 0]
        psi[i] = 0.99 * psi[i - 1] + steer[i]
        theta[i] = 1.5 * theta[i - 1] - 0.7 * theta[i - 2] + 0.02 * s * w[i, 1]
        phi[i] = 1.4 * phi[i - 1] - 0.6 * phi[i - 2] + 0.01 * s * w[i, 2]
    alpha = 0.5 * psi + 0.15 * s * w[:, 3]
    beta = -0.5 * theta - 0.5 * _DEG + 0.15 * s * w[:, 4]
    P = np.column_stack([theta, psi, phi, alpha, beta])[burn:]
    return PoseSequence([MotionParams.from_array(p) for p in P], source=f"synthetic-driving:{seed}")


def handheld_motion(rng: np.random.Generator) -> MotionParams:
    """One handheld-camera step: rotation-dominated, arbitrary translation heading."""
    rot = rng.uniform(-1.5, 1.5, 3) * _DEG
    alpha = rng.uniform(-np.pi, np.pi)
    beta = rng.uniform(-0.5, 0.5)
    return MotionParams(rot[0], rot[1], rot[2], alpha, beta)
