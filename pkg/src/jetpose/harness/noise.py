from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import MotionParams


@dataclass(frozen=True)
class NoiseRanges:
    """Half-widths of the uniform initialization noise (degrees, degrees, pixels)."""

    rotation_deg: float = 1.0
    translation_deg: float = 10.0
    pixels: float = 5.0

    def __post_init__(self):
        if min(self.rotation_deg, self.translation_deg, self.pixels) < 0:
            raise ValueError("noise ranges must be non-negative")


DRIVING_NOISE = NoiseRanges(1.0, 10.0, 5.0)
HANDHELD_NOISE = NoiseRanges(5.0, 20.0, 5.0)


def inject_noise(p_gt, ys_gt, ranges: NoiseRanges, seed) -> tuple[MotionParams, np.ndarray]:
    """Uniform noise on each rotation angle, each translation angle and each
    coordinate of every second-view point.  ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = p_gt.as_array() if isinstance(p_gt, MotionParams) else np.asarray(p_gt, dtype=float)
    ys = np.asarray(ys_gt, dtype=float).reshape(-1, 2)
    rot = np.deg2rad(ranges.rotation_deg) * rng.uniform(-1.0, 1.0, 3)
    trans = np.deg2rad(ranges.translation_deg) * rng.uniform(-1.0, 1.0, 2)
    px = ranges.pixels * rng.uniform(-1.0, 1.0, ys.shape)
    return MotionParams.from_array(p + np.concatenate([rot, trans])), ys + px
