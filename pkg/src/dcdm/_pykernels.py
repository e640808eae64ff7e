"""Numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
here with the same signature and must agree to within a few ulp.
"""
from __future__ import annotations

from collections import deque

import numpy as np


def masked_softmax(scores, allow=None):
    """Row softmax over the last axis of a (N, H, R, C) array.

    ``allow`` is an optional (N, R, C) boolean array shared across the H
    axis. Forbidden entries get probability zero; rows with no allowed entry
    come back as all zeros.
    """
    if allow is None:
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        return e / e.sum(axis=-1, keepdims=True)
    allow = allow[:, None, :, :]
    s = np.where(allow, scores, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    e = np.exp(s - m)
    z = e.sum(axis=-1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def masked_softmax_grad(probs, grad):
    return probs * (grad - (probs * grad).sum(axis=-1, keepdims=True))


def noise_masks(nu):
    """(N, L) indicators -> (N, L, L) boolean noise masks."""
    nu = np.asarray(nu, dtype=bool)
    n, length = nu.shape
    eye = np.eye(length, dtype=bool)
    return (~nu)[:, None, :] | (nu[:, :, None] & eye[None])


def chunk_causal_masks(c):
    c = np.asarray(c)
    return c[:, None, :] <= c[:, :, None]


def training_masks(c, nu):
    """(N, L) chunk ids and indicators -> (N, 2L, 2L) dual-stream masks.

    Noisy half occupies rows/columns ``0..L-1``, clean half ``L..2L-1``.
    """
    c = np.asarray(c)
    n, length = c.shape
    cq = c[:, :, None]
    ck = c[:, None, :]
    out = np.zeros((n, 2 * length, 2 * length), dtype=bool)
    out[:, :length, :length] = cq == ck
    out[:, :length, length:] = cq > ck
    out[:, length:, length:] = (cq >= ck) & noise_masks(nu)
    return out


def reach(first, rest, source):
    """Information-flow search from ``source``.

    One application of ``first`` (plus the residual self edge), then the
    transitive closure of ``rest``. Edges run key -> query, i.e. ``q`` is
    reachable from ``k`` when ``allow[q, k]``. Returns ``(parent, via_first)``
    where ``parent[q] == -1`` marks unreached nodes.
    """
    size = first.shape[0]
    parent = np.full(size, -1, dtype=np.int64)
    via_first = np.zeros(size, dtype=np.uint8)
    parent[source] = source
    queue = deque([source])
    for q in np.flatnonzero(first[:, source]):
        if parent[q] == -1:
            parent[q] = source
            via_first[q] = 1
            queue.append(int(q))
    while queue:
        k = queue.popleft()
        for q in np.flatnonzero(rest[:, k]):
            if parent[q] == -1:
                parent[q] = k
                queue.append(int(q))
    return parent, via_first
