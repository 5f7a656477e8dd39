"""(epsilon, delta)-DP for client uploads: L2 clipping followed by Gaussian noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pfsim.params import NamedParams, l2_norm


@dataclass(frozen=True)
class DpConfig:
    enabled: bool = False
    epsilon: float = 1.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    sigma: float | None = None  # explicit override of the calibrated noise scale

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def noise_scale(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return gaussian_sigma(self.epsilon, self.delta, self.clip_norm)


def clip_update(update: NamedParams, clip_norm: float) -> NamedParams:
    """Scale ``update`` down to global L2 norm ``clip_norm`` if it is longer."""
    norm = l2_norm(update)
    if norm <= clip_norm:
        return update
    factor = clip_norm / norm
    return update.map(lambda v: v * factor)


def gaussian_sigma(epsilon: float, delta: float, clip_norm: float) -> float:
    """Classical Gaussian-mechanism scale for L2 sensitivity ``clip_norm``.

    The bound is only proven for epsilon <= 1; larger values still return the
    formula's value.
    """
    if not (epsilon > 0 and clip_norm > 0 and 0 < delta < 1):
        raise ValueError(f"invalid DP parameters: epsilon={epsilon}, delta={delta}, C={clip_norm}")
    return clip_norm * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def noise_update(update: NamedParams, sigma: float, rng: np.random.Generator) -> NamedParams:
    """Add i.i.d. N(0, sigma^2) noise to every coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return update
    return update.map(lambda v: v + rng.normal(0.0, sigma, size=v.shape))
