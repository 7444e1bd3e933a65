"""Gaussian-process input signals with a squared-exponential kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _random
from ..errors import IllConditionedKernelError, InvalidRangeError
from ..model import InputSignal

__all__ = ["GPConfig", "se_kernel", "sample_gp", "sample_bounded_frequency", "frequency_transform"]

_JITTERS = 10.0 ** np.arange(-12, -3)


@dataclass(frozen=True)
class GPConfig:
    mean: float
    std: float
    timescale: float
    times: tuple
    seed: int = 0
    index: int = 0
    purpose: str = "gp"


def se_kernel(t1, t2, std, timescale):
    """``K(t1, t2) = std^2 exp(-(t1 - t2)^2 / (2 timescale^2))`` on all pairs."""
    d = np.subtract.outer(np.asarray(t1, dtype=float), np.asarray(t2, dtype=float))
    return std**2 * np.exp(-(d * d) / (2.0 * timescale**2))


def _cholesky(K, scale):
    # the SE kernel is numerically singular on fine grids; add the smallest
    # diagonal jitter (relative to the variance) that makes it factorable
    for jit in _JITTERS:
        try:
            return np.linalg.cholesky(K + jit * scale * np.eye(K.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedKernelError("kernel matrix not factorable even with jitter 1e-4")


def sample_gp(config: GPConfig) -> InputSignal:
    times = np.asarray(config.times, dtype=np.float64)
    if times.size == 0:
        raise InvalidRangeError("empty time grid")
    if not (config.std > 0 and config.timescale > 0):
        raise InvalidRangeError("std and timescale must be positive")
    K = se_kernel(times, times, config.std, config.timescale)
    L = _cholesky(K, config.std**2)
    zeta = _random.stream(config.seed, config.purpose, config.index).standard_normal(times.size)
    return InputSignal(times, config.mean + L @ zeta)


def sample_bounded_frequency(fmin, fmax, tau, grid, seed, index=0, purpose="frequency"):
    """``F = (fmin + fmax)/2 + (fmax - fmin)/2 * tanh(3 g / 5)`` with ``g`` a unit GP."""
    if not fmax > fmin > 0:
        raise InvalidRangeError(f"need fmax > fmin > 0, got {fmin}, {fmax}")
    g = sample_gp(GPConfig(0.0, 1.0, tau, tuple(grid), seed, index, purpose))
    return InputSignal(g.times, frequency_transform(g.values, fmin, fmax))


def frequency_transform(gamma, fmin, fmax):
    return 0.5 * (fmin + fmax + (fmax - fmin) * np.tanh(0.6 * np.asarray(gamma)))
