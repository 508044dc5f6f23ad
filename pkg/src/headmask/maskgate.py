"""Gumbel-sigmoid head gates with a straight-through estimator.

Training samples ``S = sigmoid((M + G) / tau)`` and runs the model with the
hard mask ``S >= 0.5``; the gradient arriving at the hard mask is copied onto
``S`` and chained through the sigmoid to the logits ``M``. At inference the
mask is simply ``M >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

EPS_CLAMP = 1e-12


@dataclass
class MaskLogits:
    values: np.ndarray
    rng_seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("mask logits must be an n x h matrix")
        if not np.isfinite(self.values).all():
            raise ValueError("mask logits must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def initial(cls, n: int, h: int, seed: int, mean: float = 4.0, std: float = 0.02) -> "MaskLogits":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(mean, std, size=(n, h)), rng_seed=seed)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gumbel_from_uniform(eps) -> np.ndarray:
    e = np.clip(np.asarray(eps, dtype=np.float64), EPS_CLAMP, 1.0 - EPS_CLAMP)
    return -np.log(-np.log(e))


def sample_gumbel(rng: np.random.Generator, n: int, h: int) -> np.ndarray:
    """i.i.d. Gumbel(0, 1) noise of shape (n, h)."""
    return gumbel_from_uniform(rng.random((n, h)))


def soft_mask(logits, noise, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    m = logits.values if isinstance(logits, MaskLogits) else np.asarray(logits, dtype=np.float64)
    return _sigmoid((m + np.asarray(noise, dtype=np.float64)) / tau)


def harden(soft) -> np.ndarray:
    return np.asarray(soft) >= 0.5


def ste_grad(grad_hard, soft, tau: float) -> np.ndarray:
    """Chain the hard-mask gradient through the sigmoid onto the logits."""
    s = np.asarray(soft, dtype=np.float64)
    return np.asarray(grad_hard, dtype=np.float64) * s * (1.0 - s) / tau


def infer_mask(logits) -> np.ndarray:
    m = logits.values if isinstance(logits, MaskLogits) else np.asarray(logits, dtype=np.float64)
    return m >= 0


def quantile_count(q: float, total: int) -> int:
    """ceil(q * total), with q read as the decimal it was written as (0.1 -> 1/10)."""
    if not 0 <= q <= 1:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return math.ceil(Fraction(repr(float(q))) * total)


def quantile_mask(logits, q: float) -> np.ndarray:
    """Activate the ceil(q*n*h) heads with the largest logits.

    Equal logits are ordered by (layer, head), lower index first, so the
    active sets are nested as q grows.
    """
    m = logits.values if isinstance(logits, MaskLogits) else np.asarray(logits, dtype=np.float64)
    flat = m.ravel()
    k = quantile_count(q, flat.size)
    order = np.lexsort((np.arange(flat.size), -flat))
    bits = np.zeros(flat.size, dtype=bool)
    bits[order[:k]] = True
    return bits.reshape(m.shape)
