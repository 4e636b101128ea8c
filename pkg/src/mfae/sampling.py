"""Gumbel-Max sampling and the Gumbel-Softmax relaxation of categorical draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NonFiniteError

UNIFORM_CLAMP = 1e-12


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")


def gumbel_noise(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """i.i.d. Gumbel(0, 1) samples ``-log(-log(u))`` with ``u`` kept away from 0 and 1."""
    u = rng.uniform(size=shape)
    u = np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return (-np.log(-np.log(u))).astype(dtype)


def _check_logits(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("logits must be finite")
    return logits


def gumbel_max_sample(logits, rng: np.random.Generator, noise=None) -> np.ndarray:
    """One-hot draw from ``Cat(softmax(logits))``.

    ``logits`` may be a K vector or an N x K matrix (one draw per row).  A
    pre-drawn ``noise`` array of the same shape replaces fresh noise.
    """
    logits = _check_logits(logits)
    if noise is None:
        noise = gumbel_noise(logits.shape, rng)
    idx = np.argmax(logits + noise, axis=-1)
    return np.eye(logits.shape[-1])[idx]


def gumbel_softmax_sample(logits, tau: float, rng: np.random.Generator, noise=None) -> np.ndarray:
    """Relaxed one-hot draw ``softmax((logits + g) / tau)`` as a plain array."""
    if not tau > 0:
        raise ConfigError("tau must be positive")
    logits = _check_logits(logits)
    if noise is None:
        noise = gumbel_noise(logits.shape, rng)
    z = (logits + noise) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_softmax(logits: Tensor, tau: float, noise: np.ndarray) -> Tensor:
    """Differentiable relaxed sample for an N x K logit tensor and frozen noise."""
    if not tau > 0:
        raise ConfigError("tau must be positive")
    return ad.softmax(ad.scale(ad.add(logits, noise.astype(logits.dtype)), 1.0 / tau))


def stream(seed: int, *keys: int) -> np.random.Generator:
    """An independent generator for ``(seed, *keys)``, e.g. ``(seed, epoch)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))
