"""Attention-permission matrices for single- and dual-stream denoising.

``allow[q, k]`` is True when query ``q`` may attend key ``k``. In the
dual-stream layout positions ``0..L-1`` hold the noisy sequence and
``L..2L-1`` the clean copy; chunk ids and noise indicators are shared across
halves by position mod L. Chunk ids are 1-based.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels


@dataclass(frozen=True)
class JointMask:
    allow: np.ndarray
    stage: str  # "chunking" | "denoising" | "inference"

    @property
    def size(self) -> int:
        return self.allow.shape[-1]


def _as_row(a, dtype) -> np.ndarray:
    a = np.asarray(a, dtype=dtype)
    if a.ndim != 1:
        raise ValueError(f"expected a 1-D array, got shape {a.shape}")
    return a[None]


def noise_mask(nu) -> JointMask:
    """Query sees every clean key, and itself if it is masked."""
    return JointMask(kernels.noise_masks(_as_row(nu, np.uint8))[0], "chunking")


def chunk_mask_inference(c) -> JointMask:
    """Chunk-causal mask ``allow[l, m] = c_m <= c_l``."""
    return JointMask(kernels.chunk_causal_masks(_as_row(c, np.int64))[0], "inference")


def joint_training_mask(c, nu) -> JointMask:
    """2L x 2L denoising-stage mask.

    Noisy queries see noisy keys of their own chunk and clean keys of
    strictly earlier chunks. Clean queries see clean keys of the same or
    earlier chunks, further restricted by the noise mask. Nothing lets a
    clean query read a noisy key.
    """
    c = np.asarray(c)
    nu = np.asarray(nu)
    if c.shape != nu.shape:
        raise ValueError(f"chunk ids {c.shape} and noise indicators {nu.shape} differ in length")
    return JointMask(kernels.training_masks(_as_row(c, np.int64), _as_row(nu, np.uint8))[0],
                     "denoising")


def stage1_training_mask(nu) -> JointMask:
    """Chunking-stage mask on the doubled sequence: a noise mask per half, no cross-half edges."""
    nm = noise_mask(nu).allow
    length = nm.shape[0]
    out = np.zeros((2 * length, 2 * length), dtype=bool)
    out[:length, :length] = nm
    out[length:, length:] = nm
    return JointMask(out, "chunking")


def positional_chunks(length: int, block: int) -> np.ndarray:
    """Contiguous blocks of ``block`` positions: ids 1, 1, ..., 2, 2, ..."""
    if block < 1:
        raise ValueError("block size must be positive")
    return np.arange(length, dtype=np.int64) // block + 1


# batched forms used by the denoiser ---------------------------------------

def batch_noise_masks(nu: np.ndarray) -> np.ndarray:
    return kernels.noise_masks(np.asarray(nu, dtype=np.uint8))


def batch_stage1_masks(nu: np.ndarray) -> np.ndarray:
    nm = batch_noise_masks(nu)
    n, length, _ = nm.shape
    out = np.zeros((n, 2 * length, 2 * length), dtype=bool)
    out[:, :length, :length] = nm
    out[:, length:, length:] = nm
    return out


def batch_training_masks(c: np.ndarray, nu: np.ndarray) -> np.ndarray:
    return kernels.training_masks(np.asarray(c, dtype=np.int64), np.asarray(nu, dtype=np.uint8))


def batch_chunk_masks(c: np.ndarray) -> np.ndarray:
    return kernels.chunk_causal_masks(np.asarray(c, dtype=np.int64))


# leakage verification -------------------------------------------------------

class LeakageVerdict(NamedTuple):
    clean: bool
    path: list[tuple[str, int]] | None  # (half, position) from source to victim
    source: int | None = None
    victim: int | None = None


def _node_name(node: int, length: int) -> tuple[str, int]:
    return ("noisy", node) if node < length else ("clean", node - length)


def verify_no_leakage(mask, c, nu) -> LeakageVerdict:
    """Search the information-flow graph for a path that leaks a masked token.

    Information moves key -> query. The graph is one chunking-stage layer
    (per-half noise masks) followed by arbitrarily many layers of ``mask``,
    with residual self edges throughout. For every masked m, the clean copy
    of x_m must not reach any masked noisy query l with ``c_l <= c_m``.
    """
    allow = mask.allow if isinstance(mask, JointMask) else np.asarray(mask, dtype=bool)
    c = np.asarray(c, dtype=np.int64)
    nu = np.asarray(nu, dtype=np.int64)
    length = c.shape[0]
    if allow.shape != (2 * length, 2 * length):
        raise ValueError(f"expected a {2 * length}x{2 * length} training mask, got {allow.shape}")
    first = stage1_training_mask(nu).allow
    masked = np.flatnonzero(nu == 1)
    for m in masked:
        source = length + int(m)
        parent, _ = kernels.reach(first, allow, source)
        for l in masked:
            if c[l] <= c[m] and parent[l] != -1:
                path = [int(l)]
                while path[-1] != source:
                    path.append(int(parent[path[-1]]))
                path.reverse()
                return LeakageVerdict(False, [_node_name(n, length) for n in path], int(m), int(l))
    return LeakageVerdict(True, None)
