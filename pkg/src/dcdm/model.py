"""Transformer denoiser with a chunking stage, for mdlm / bdlm / dcdm modes.

Layout: token + position + time embedding, one pre-norm block and a
subspace-routing sublayer under the chunking-stage noise mask, then
``n_layers - 1`` pre-norm blocks under the chunk mask, then a tied output
head. The routing sublayer is present in every mode so the three modes
share one parameter set; only dcdm reads its hard assignments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import masks
from .autodiff import Tape, Tensor
from .chunking import (BiasState, affinity, chunk_balance_loss, gumbel_noise, gumbel_st_sample,
                       project, route_hard, soft_aggregate)
from .config import ModelConfig

NEG_LOGIT = -1e9  # fixed logit for MASK: the denoiser never predicts it


@dataclass
class DenoiserOutput:
    logits: Tensor        # (B, L, V) over the noisy half only
    chunks: np.ndarray    # (B, L) 1-based chunk ids
    aux: Tensor           # scalar balance loss, zero unless dcdm routing ran
    counts: np.ndarray    # per-chunk token tallies for this pass


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, std = cfg.d, cfg.init_std

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    p = {
        "tok_emb": normal(cfg.vocab_size, d),
        "pos_emb": normal(cfg.max_len, d),
        "time_proj": normal(d, d),
    }
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        p[pre + "attn_norm"] = np.ones(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + w] = normal(d, d)
        p[pre + "mlp_norm"] = np.ones(d)
        p[pre + "w_gate"] = normal(d, cfg.d_ff)
        p[pre + "w_up"] = normal(d, cfg.d_ff)
        p[pre + "w_down"] = normal(cfg.d_ff, d)
    p["chunk.norm"] = np.ones(d)
    mu = normal(cfg.K, d, cfg.h)
    mu[0] *= cfg.mu_skew
    p["chunk.mu"] = mu
    p["chunk.w_v"] = normal(d, d)
    p["chunk.w_o"] = normal(d, d)
    p["final_norm"] = np.ones(d)
    return p


def time_features(t: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal features of ``1000 t``, shape (B, d)."""
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if feats.shape[1] < d:
        feats = np.pad(feats, ((0, 0), (0, d - feats.shape[1])))
    return feats


class Denoiser:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 bias: BiasState | None = None, seed: int | None = None):
        self.cfg = cfg.validate()
        if params is None:
            params = init_params(cfg, np.random.default_rng(cfg.seed if seed is None else seed))
        self.params = params
        self.bias = bias if bias is not None else BiasState.zeros(cfg.K, cfg.eta_b, cfg.bias_interval)

    # parameter views ---------------------------------------------------------

    def taped(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.variable(a, name) for name, a in self.params.items()}

    def constants(self) -> dict[str, Tensor]:
        return {name: Tensor(a) for name, a in self.params.items()}

    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    # building blocks ---------------------------------------------------------

    def _embed(self, P, tokens: np.ndarray, positions: np.ndarray, t: np.ndarray) -> Tensor:
        h = ad.take_rows(P["tok_emb"], tokens) + ad.take_rows(P["pos_emb"], positions)
        temb = Tensor(time_features(t, self.cfg.d)) @ P["time_proj"]
        return h + temb.reshape(temb.shape[0], 1, self.cfg.d)

    def _attention(self, P, pre: str, x: Tensor, allow: np.ndarray | None,
                   split: int | None = None) -> Tensor:
        """Multi-head attention. With ``split=L`` the input is a dual stream
        whose clean half (rows ``L:``) never reads the noisy half, so those
        rows are scored against clean keys only."""
        B, S, d = x.shape
        H = self.cfg.n_heads
        dh = d // H

        def heads(w):
            return (x @ P[pre + w]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)

        q = heads("wq") * (1.0 / math.sqrt(dh))
        k, v = heads("wk"), heads("wv")
        if split is None:
            att = ad.softmax_rows(q @ k.transpose(0, 1, 3, 2), allow)
            out = att @ v
        else:
            L = split
            kt = k.transpose(0, 1, 3, 2)
            noisy = ad.softmax_rows(q[:, :, :L] @ kt, allow[:, :L, :])
            clean = ad.softmax_rows(q[:, :, L:] @ kt[:, :, :, L:], allow[:, L:, L:])
            out = ad.concat([noisy @ v, clean @ v[:, :, L:]], axis=2)
        out = out.transpose(0, 2, 1, 3).reshape(B, S, d)
        return out @ P[pre + "wo"]

    def _block(self, P, i: int, h: Tensor, allow: np.ndarray | None,
               split: int | None = None) -> Tensor:
        pre = f"blocks.{i}."
        eps = self.cfg.norm_eps
        h = h + self._attention(P, pre, ad.rms_norm(h, P[pre + "attn_norm"], eps), allow, split)
        x = ad.rms_norm(h, P[pre + "mlp_norm"], eps)
        gated = ad.silu(x @ P[pre + "w_gate"]) * (x @ P[pre + "w_up"])
        return h + gated @ P[pre + "w_down"]

    def _chunk_layer(self, P, h: Tensor, allow: np.ndarray | None) -> tuple[Tensor, Tensor]:
        """Residual subspace-routing sublayer; also returns routing norms (B, S, K)."""
        x = ad.rms_norm(h, P["chunk.norm"], self.cfg.norm_eps)
        scores = project(x, P["chunk.mu"])
        y = soft_aggregate(x, affinity(scores.p), P["chunk.w_v"], P["chunk.w_o"], allow)
        return h + y, scores.r

    def _head(self, P, h: Tensor) -> Tensor:
        V = self.cfg.vocab_size
        x = ad.rms_norm(h, P["final_norm"], self.cfg.norm_eps)
        emb = P["tok_emb"][: V - 1]
        logits = x @ emb.transpose(1, 0)
        pad = Tensor(np.full(logits.shape[:-1] + (1,), NEG_LOGIT))
        return ad.concat([logits, pad], axis=-1)

    def _positional(self, B: int, L: int) -> np.ndarray:
        return np.broadcast_to(masks.positional_chunks(L, self.cfg.block_size), (B, L)).copy()

    # forward passes ----------------------------------------------------------

    def forward_train(self, batch, params=None, rng: np.random.Generator | None = None, *,
                      chunks=None, gumbel: np.ndarray | None = None, relaxed: bool = False,
                      track: bool = True) -> DenoiserOutput:
        """Dual-stream training pass (single stream for mdlm).

        ``chunks`` overrides routing: ``"positional"`` or a (B, L) / (L,)
        array of 1-based ids. An override disables the balance loss.
        ``gumbel`` pins the Gumbel draws; ``relaxed`` swaps the straight-through
        sample for its softmax surrogate; ``track=False`` leaves the bias
        counters untouched.
        """
        cfg = self.cfg
        P = self.constants() if params is None else params
        B, L = batch.x.shape
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len={cfg.max_len}")
        stage1 = masks.batch_noise_masks(batch.nu)
        if cfg.mode == "mdlm":
            h = self._embed(P, batch.z_t, np.arange(L), batch.t)
            h = self._block(P, 0, h, stage1)
            h, r = self._chunk_layer(P, h, stage1)
        else:
            # the chunking stage has no cross-half edges, so each half runs
            # as its own sequence: rows (2b, 2b+1) are (noisy, clean) of b
            tokens = np.stack([batch.z_t, batch.x], axis=1).reshape(2 * B, L)
            t2 = np.repeat(batch.t, 2)
            stage1 = np.repeat(stage1, 2, axis=0)
            h = self._embed(P, tokens, np.arange(L), t2)
            h = self._block(P, 0, h, stage1)
            h, r = self._chunk_layer(P, h, stage1)
            h = h.reshape(B, 2 * L, cfg.d)
            r = r.reshape(B, 2, L, cfg.K)[:, 0]

        aux = Tensor(0.0)
        routed = False
        if chunks is None:
            if cfg.mode == "dcdm":
                c = route_hard(r, self.bias, update_counts=track)
                if gumbel is None:
                    if rng is None:
                        raise ValueError("dcdm training needs rng or pre-drawn gumbel noise")
                    gumbel = gumbel_noise(r.shape, rng)
                sample = gumbel_st_sample(r, cfg.gumbel_tau, noise=gumbel, relaxed=relaxed)
                aux = chunk_balance_loss(sample, cfg.balance_eps)
                routed = True
            elif cfg.mode == "bdlm":
                c = self._positional(B, L)
            else:
                c = np.ones((B, L), dtype=np.int64)
        elif isinstance(chunks, str):
            if chunks != "positional":
                raise ValueError(f"unknown chunk override {chunks!r}")
            c = self._positional(B, L)
        else:
            c = np.broadcast_to(np.asarray(chunks, dtype=np.int64), (B, L)).copy()

        if cfg.mode == "mdlm":
            if not np.all(c == 1):
                raise ValueError("mdlm mode has a single chunk")
            deep_mask, split = None, None
        else:
            deep_mask, split = masks.batch_training_masks(c, batch.nu), L
        for i in range(1, cfg.n_layers):
            h = self._block(P, i, h, deep_mask, split)
        logits = self._head(P, h[:, :L, :])
        n_ids = cfg.K if routed else int(c.max())
        counts = np.bincount((c - 1).reshape(-1), minlength=n_ids)
        return DenoiserOutput(logits, c, aux, counts)

    def forward_infer(self, z, t, params=None, frozen_c=None) -> DenoiserOutput:
        """Single-stream pass on a partially masked sequence (L,) or batch (B, L)."""
        cfg = self.cfg
        P = self.constants() if params is None else params
        z = np.atleast_2d(np.asarray(z, dtype=np.int64))
        B, L = z.shape
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len={cfg.max_len}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        nu = (z == cfg.mask_id).astype(np.uint8)
        stage1 = masks.batch_noise_masks(nu)
        h = self._embed(P, z, np.arange(L), t)
        h = self._block(P, 0, h, stage1)
        h, r = self._chunk_layer(P, h, stage1)
        if frozen_c is not None:
            c = np.asarray(frozen_c, dtype=np.int64)
            if c.shape[-1] != L:
                raise ValueError(f"frozen chunk ids have length {c.shape[-1]}, sequence has {L}")
            c = np.broadcast_to(c, (B, L)).copy()
        elif cfg.mode == "dcdm":
            c = route_hard(r, self.bias, update_counts=False)
        elif cfg.mode == "bdlm":
            c = self._positional(B, L)
        else:
            c = np.ones((B, L), dtype=np.int64)
        deep_mask = masks.batch_chunk_masks(c)
        for i in range(1, cfg.n_layers):
            h = self._block(P, i, h, deep_mask)
        logits = self._head(P, h)
        counts = np.bincount((c - 1).reshape(-1), minlength=int(c.max()))
        return DenoiserOutput(logits, c, Tensor(0.0), counts)
