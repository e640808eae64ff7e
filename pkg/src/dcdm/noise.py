"""Absorbing-state forward process with a linear schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_T = 1e-3


def alpha(t: float) -> float:
    """Probability that a token survives to time ``t``: ``1 - t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return 1.0 - t


def alpha_prime(t: float) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return -1.0


def nelbo_weight(t, eps_t: float = EPS_T):
    """Positive loss weight ``-alpha'(t) / (1 - alpha(t))``, i.e. ``1/t``.

    Accepts a scalar or an array of times.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < eps_t) or np.any(t_arr > 1.0):
        raise ValueError(f"t must lie in [{eps_t}, 1], got {t}")
    w = 1.0 / t_arr
    return float(w) if w.ndim == 0 else w


@dataclass
class DiffusionBatch:
    """A batch of corrupted sequences. Arrays carry a leading batch axis.

    x, z_t, nu: (B, L) integers; t, weight: (B,) floats.
    """

    x: np.ndarray
    z_t: np.ndarray
    nu: np.ndarray
    t: np.ndarray
    weight: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def length(self) -> int:
        return self.x.shape[1]


def sample_t(n: int, rng: np.random.Generator, eps_t: float = EPS_T) -> np.ndarray:
    """One timestep per sequence, uniform on [eps_t, 1]."""
    return eps_t + (1.0 - eps_t) * rng.random(n)


def corrupt(x, t, rng: np.random.Generator, mask_id: int, eps_t: float = EPS_T) -> DiffusionBatch:
    """Mask each position independently with probability ``1 - alpha(t)``.

    ``x`` may be one sequence (L,) or a batch (B, L); ``t`` a scalar or (B,).
    The result always has a batch axis.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy()
    if np.any(x < 0) or np.any(x >= mask_id):
        raise ValueError(f"token ids must lie in [0, {mask_id})")
    weight = nelbo_weight(t, eps_t)
    keep = 1.0 - t
    nu = (rng.random(x.shape) >= keep[:, None]).astype(np.int8)
    z_t = np.where(nu == 1, mask_id, x)
    return DiffusionBatch(x=x, z_t=z_t, nu=nu, t=t, weight=np.atleast_1d(weight))
