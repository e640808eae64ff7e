"""Subspace routing attention: soft aggregation, hard routing, load balancing.

Each of the K clusters owns a d x h basis ``mu[k]``. A token's projection
onto that basis drives two things that share the same geometry: a bilinear
affinity between tokens (soft path, differentiable) and the per-cluster
alignment score used for the hard chunk id (no gradient).

Chunk ids returned here are 1-based, matching the mask compiler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, lift, matmul, softmax_rows, straight_through, transpose, vector_norm
from . import autodiff as ad


@dataclass
class SubspaceBank:
    mu: np.ndarray  # (K, d, h)

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    @property
    def h(self) -> int:
        return self.mu.shape[2]

    @classmethod
    def init(cls, K: int, d: int, h: int, rng: np.random.Generator, std: float = 0.02):
        if K < 1 or not 1 <= h <= d:
            raise ValueError(f"need K >= 1 and 1 <= h <= d, got K={K}, h={h}, d={d}")
        return cls(rng.normal(0.0, std, size=(K, d, h)))


def parameter_count(K: int, d: int, h: int) -> int:
    """Bases plus the value/output projections."""
    return K * d * h + 2 * d * d


class RoutingScores(NamedTuple):
    p: Tensor  # (..., K, L, h) projections
    r: Tensor  # (..., L, K) projection norms


def project(H, mu) -> RoutingScores:
    """Project every token onto every cluster basis.

    ``H`` is (L, d) or (B, L, d); ``mu`` is (K, d, h).
    """
    H, mu = lift(H), lift(mu)
    if H.shape[-1] != mu.shape[1]:
        raise ValueError(f"hidden size {H.shape[-1]} does not match basis rows {mu.shape[1]}")
    lead = H.shape[:-2]
    Hx = H.reshape(*lead, 1, H.shape[-2], H.shape[-1])
    p = matmul(Hx, mu)
    r = vector_norm(p)  # (..., K, L)
    nd = r.ndim
    r = transpose(r, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return RoutingScores(p, r)


def affinity(p) -> Tensor:
    """Scaled Gram matrix of projections: ``p p^T / sqrt(h)`` over the last two axes."""
    p = lift(p)
    nd = p.ndim
    pt = transpose(p, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return matmul(p, pt) * (1.0 / math.sqrt(p.shape[-1]))


def soft_aggregate(H, affinities, w_v, w_o, allow: np.ndarray | None = None) -> Tensor:
    """Mix tokens through the averaged per-cluster softmax operators.

    Row-vector form of ``Y = W_O (K^-1/2 sum_k softmax(A_k)) W_V H``:
    ``Y = (K^-1/2 sum_k T_k) (H W_V) W_O``. ``affinities`` is (..., K, L, L);
    ``allow`` (optional, (..., L, L)) is applied to every cluster's softmax.
    """
    H, A = lift(H), lift(affinities)
    K = A.shape[-3]
    if A.shape[-1] != H.shape[-2]:
        raise ValueError(f"affinities {A.shape} do not match hidden states {H.shape}")
    batched = A.ndim == 4
    if not batched:
        A = A.reshape(1, *A.shape)
        if allow is not None:
            allow = allow[None]
    T = softmax_rows(A, allow).sum(axis=1)  # (B, L, L)
    if not batched:
        T = T.reshape(T.shape[1:])
    mix = T * (1.0 / math.sqrt(K))
    return matmul(matmul(mix, matmul(H, w_v)), w_o)


@dataclass
class BiasState:
    """Non-trainable per-cluster routing offsets and their load counter."""

    b: np.ndarray
    counts: np.ndarray
    eta_b: float = 1e-3
    interval: int = 1
    steps: int = field(default=0)
    updates: int = field(default=0)

    @classmethod
    def zeros(cls, K: int, eta_b: float = 1e-3, interval: int = 1) -> "BiasState":
        return cls(np.zeros(K), np.zeros(K, dtype=np.int64), eta_b, interval)

    @property
    def K(self) -> int:
        return self.b.shape[0]

    def step(self) -> bool:
        """Call once per optimizer step; applies the update on schedule."""
        self.steps += 1
        if self.steps % self.interval == 0:
            bias_update(self)
            return True
        return False


def route_hard(r, bias: BiasState | None = None, update_counts: bool = True) -> np.ndarray:
    """``argmax_k (r + b)`` as 1-based ids; ties resolve to the lowest k."""
    r = r.data if isinstance(r, Tensor) else np.asarray(r, dtype=np.float64)
    if bias is None:
        scores = r
    else:
        if bias.K != r.shape[-1]:
            raise ValueError(f"scores have K={r.shape[-1]}, bias has K={bias.K}")
        scores = r + bias.b
    idx = np.argmax(scores, axis=-1)
    if bias is not None and update_counts:
        bias.counts += np.bincount(idx.reshape(-1), minlength=bias.K)
    return idx + 1


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def gumbel_st_sample(r, tau: float = 1.0, rng: np.random.Generator | None = None,
                     noise: np.ndarray | None = None, relaxed: bool = False) -> Tensor:
    """Straight-through Gumbel-softmax over the last axis of ``r``.

    Forward: one-hot at ``argmax (r + g) / tau``. Backward: gradient of
    ``softmax((r + g) / tau)``. Pass ``noise`` to pin the Gumbel draws;
    ``relaxed=True`` returns the softmax surrogate itself (used by the
    finite-difference checks, which cannot see through a hard forward).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    r = lift(r)
    if noise is None:
        if rng is None:
            raise ValueError("need rng or pre-drawn noise")
        noise = gumbel_noise(r.shape, rng)
    K = r.shape[-1]
    logits = (r + noise) * (1.0 / tau)
    soft = softmax_rows(logits.reshape(-1, K)).reshape(r.shape)
    if relaxed:
        return soft
    hard = np.zeros(r.shape)
    np.put_along_axis(hard, np.argmax(logits.data, axis=-1)[..., None], 1.0, axis=-1)
    return straight_through(hard, soft)


def chunk_balance_loss(samples, eps: float = 1e-8) -> Tensor:
    """``-(1/(B K)) sum_b sum_k log(f_bk + eps)`` with f the per-sequence usage.

    ``samples`` is (L, K) for one sequence or (B, L, K).
    """
    samples = lift(samples)
    f = samples.mean(axis=-2)
    return -(ad.log(f + eps).mean())


def bias_update(state: BiasState) -> BiasState:
    """``b_k -= eta_b (N_k / N - 1/K)``, then reset the counts. No-op if N == 0."""
    total = state.counts.sum()
    if total == 0:
        return state
    load = state.counts / total
    state.b = state.b - state.eta_b * (load - 1.0 / state.K)
    state.counts = np.zeros_like(state.counts)
    state.updates += 1
    return state


def cluster_violation(counts) -> float:
    """``(K/2) sum_k |N_k/N - 1/K|``; 0 for uniform use, K-1 for total collapse."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("cluster_violation needs at least one routed token")
    K = counts.shape[0]
    return float(K / 2.0 * np.abs(counts / total - 1.0 / K).sum())
