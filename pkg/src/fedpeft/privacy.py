"""Gaussian-mechanism differential privacy inside local optimisation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class DpConfig:
    epsilon: float = 5.0
    delta: float = 1e-3
    clip_norm: float = 1.0
    enabled: bool = True
    per_sample: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")

    @property
    def sigma(self) -> float:
        return gaussian_sigma(self.epsilon, self.delta, self.clip_norm)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def gaussian_sigma(epsilon: float, delta: float, clip_norm: float = 1.0) -> float:
    """Classical calibration ``S * sqrt(2 ln(1.25 / delta)) / epsilon``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not clip_norm > 0:
        raise ValueError(f"clip norm must be positive, got {clip_norm}")
    if not 0 < delta < 1.25:
        raise ValueError(f"delta must lie in (0, 1.25), got {delta}")
    if math.isinf(epsilon):
        return 0.0
    return clip_norm * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradient(grads, clip_norm: float):
    """Scale a gradient (array or list of arrays) by ``min(1, S / ||g||)``."""
    if not clip_norm > 0:
        raise ValueError("clip norm must be positive")
    single = isinstance(grads, np.ndarray)
    parts = [grads] if single else list(grads)
    norm = global_norm(parts)
    if norm > clip_norm:
        scale = clip_norm / norm
        parts = [(g * scale).astype(g.dtype, copy=False) for g in parts]
    return parts[0] if single else parts


def add_noise(grads, sigma: float, rng: np.random.Generator):
    if sigma == 0:
        return list(grads)
    return [(g + sigma * rng.standard_normal(g.shape)).astype(g.dtype, copy=False) for g in grads]


def dp_step(grads, cfg: DpConfig, rng: np.random.Generator):
    """Clip the joint gradient to ``cfg.clip_norm`` then add N(0, sigma^2) per coordinate."""
    return add_noise(clip_gradient(list(grads), cfg.clip_norm), cfg.sigma, rng)
