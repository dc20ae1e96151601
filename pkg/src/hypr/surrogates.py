"""Surrogate derivatives for the Heaviside spike nonlinearity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def surrogate_slayer(x, alpha: float = 5.0, c: float = 0.2):
    """Exponential surrogate: alpha * c * exp(-alpha * |x|)."""
    return alpha * c * np.exp(-alpha * np.abs(x))


def _gauss(x, sigma):
    return np.exp(-0.5 * (x / sigma) ** 2) / (sigma * _SQRT_2PI)


def surrogate_double_gaussian(
    x,
    sigma1: float = 0.5,
    sigma2: float = 3.0,
    p: float = 0.15,
    gamma: float = 0.5,
):
    """Difference of two zero-mean Gaussians, wide one subtracted."""
    return gamma * ((1.0 + p) * _gauss(x, sigma1) - 2.0 * p * _gauss(x, sigma2))


@dataclass(frozen=True)
class Surrogate:
    """Configured surrogate-derivative choice for one layer."""

    kind: str = "slayer"
    alpha: float = 5.0
    c: float = 0.2
    sigma1: float = 0.5
    sigma2: float = 3.0
    p: float = 0.15
    gamma: float = 0.5

    def __post_init__(self):
        if self.kind not in ("slayer", "double_gaussian"):
            raise ConfigError(f"unknown surrogate {self.kind!r}")

    def __call__(self, x):
        if self.kind == "slayer":
            return surrogate_slayer(x, self.alpha, self.c)
        return surrogate_double_gaussian(
            x, self.sigma1, self.sigma2, self.p, self.gamma
        )
