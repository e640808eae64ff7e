"""Masked-token NELBO and the weighted balance term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .noise import DiffusionBatch


@dataclass
class LossBreakdown:
    nelbo: Tensor
    aux_chunk: Tensor
    total: Tensor
    masked_token_count: int


def nelbo(logits, batch: DiffusionBatch) -> Tensor:
    """Batch mean of ``w(t) * sum_{masked l} -log p(x_l) / L``.

    Identical for all three modes; the mode only changes which attention
    mask produced ``logits``. Positions with ``nu == 0`` do not enter.
    """
    logits = ad.lift(logits)
    B, L = batch.x.shape
    if logits.shape[:2] != (B, L):
        raise ValueError(f"logits {logits.shape} do not cover the batch {batch.x.shape}")
    if not np.any(batch.nu):
        return Tensor(0.0) if logits.tape is None else logits.sum() * 0.0
    logp = ad.log_softmax(logits)
    pick = np.zeros(logits.shape)
    b_idx, l_idx = np.nonzero(batch.nu)
    pick[b_idx, l_idx, batch.x[b_idx, l_idx]] = 1.0
    scale = (np.asarray(batch.weight, dtype=np.float64) / (L * B))[:, None, None]
    return -(logp * (pick * scale)).sum()


def total_loss(out, batch: DiffusionBatch, cfg: ModelConfig) -> LossBreakdown:
    diffusion = nelbo(out.logits, batch)
    aux = out.aux if cfg.mode == "dcdm" else Tensor(0.0)
    total = diffusion + aux * cfg.lambda_chunk if cfg.mode == "dcdm" else diffusion
    return LossBreakdown(diffusion, aux, total, int(np.count_nonzero(batch.nu)))
