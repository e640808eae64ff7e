"""Chunk-by-chunk iterative unmasking.

Chunk ids are computed once from the prompt-plus-MASK sequence and frozen.
Chunks are then denoised in ascending id order; inside a chunk each round
commits the most confident masked positions, sampling their values at the
job's temperature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Denoiser


@dataclass
class SampleJob:
    prompt: np.ndarray
    length: int
    steps: int = 8          # denoising rounds per chunk (whole sequence for mdlm)
    temperature: float = 1.0
    seed: int = 0
    mode: str | None = None
    reroute: bool = False   # experimental: re-route unprocessed positions before each chunk

    def __post_init__(self):
        self.prompt = np.asarray(self.prompt, dtype=np.int64).reshape(-1)
        if self.prompt.size >= self.length:
            raise ValueError(f"prompt length {self.prompt.size} must be below length {self.length}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class Commit:
    chunk: int
    round: int
    positions: np.ndarray
    tokens: np.ndarray
    chosen_confidence: np.ndarray     # max-softmax probability of each committed position
    remaining_confidence: np.ndarray  # same for the candidates left masked this round


@dataclass
class SampleTrace:
    chunks: np.ndarray
    commits: list[Commit] = field(default_factory=list)


def _probabilities(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    if temperature > 0:
        z = z / temperature
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _draw(probs: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    if temperature == 0:
        return probs.argmax(axis=-1)
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.minimum((cum < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)


def _decode(model: Denoiser, job: SampleJob, chunks: np.ndarray | None,
            trace: bool) -> tuple[np.ndarray, SampleTrace]:
    cfg = model.cfg
    mask_id = cfg.mask_id
    rng = np.random.default_rng(job.seed)
    L = job.length
    z = np.full(L, mask_id, dtype=np.int64)
    z[: job.prompt.size] = job.prompt

    def t_now() -> float:
        return max(float(np.mean(z == mask_id)), cfg.eps_t)

    if chunks is None:
        chunks = model.forward_infer(z, t_now()).chunks[0]
    chunks = np.asarray(chunks, dtype=np.int64).copy()
    record = SampleTrace(chunks.copy())
    done: set[int] = set()

    while True:
        pending = sorted(set(chunks[z == mask_id].tolist()) - done)
        if not pending:
            break
        k = pending[0]
        done.add(k)
        for rnd in range(job.steps):
            cand = np.flatnonzero((chunks == k) & (z == mask_id))
            if cand.size == 0:
                break
            n = math.ceil(cand.size / (job.steps - rnd))
            logits = model.forward_infer(z, t_now(), frozen_c=chunks).logits.data[0, cand]
            conf = _probabilities(logits, 1.0).max(axis=-1)
            tokens = _draw(_probabilities(logits, job.temperature), job.temperature, rng)
            order = np.argsort(-conf, kind="stable")
            take, keep = order[:n], order[n:]
            z[cand[take]] = tokens[take]
            if trace:
                record.commits.append(Commit(k, rnd, cand[take], tokens[take],
                                             conf[take], conf[keep]))
        if np.any((chunks == k) & (z == mask_id)):
            raise RuntimeError(f"chunk {k} still has masked positions after {job.steps} rounds")
        if job.reroute:
            fresh = model.forward_infer(z, t_now()).chunks[0]
            # committed and already-processed positions keep their ids
            open_pos = (z == mask_id)
            chunks[open_pos] = np.maximum(fresh[open_pos], k + 1)
    if np.any(z == mask_id):
        raise RuntimeError("masked positions remain after the final chunk")
    record.chunks = chunks
    return z, record


def generate(job: SampleJob, model: Denoiser, trace: bool = False):
    """Chunk-autoregressive generation. Returns the tokens, or (tokens, trace)."""
    mode = job.mode or model.cfg.mode
    if mode == "mdlm":
        return generate_mdlm(job, model, trace)
    z, record = _decode(model, job, None, trace)
    return (z, record) if trace else z


def generate_mdlm(job: SampleJob, model: Denoiser, trace: bool = False):
    """Confidence-ordered unmasking over the whole sequence in ``job.steps`` rounds."""
    z, record = _decode(model, job, np.ones(job.length, dtype=np.int64), trace)
    return (z, record) if trace else z
