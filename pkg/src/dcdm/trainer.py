"""Training loop: AdamW, warmup + cosine schedule, clipping, metrics, checkpoints.

Each step draws its randomness from ``default_rng([seed, step])``, so a run
resumed from a checkpoint replays exactly the batches, timesteps, masks and
Gumbel draws of an uninterrupted run.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import NonFiniteError, Tape
from .chunking import cluster_violation
from .config import ModelConfig
from .model import Denoiser
from .noise import corrupt, sample_t
from .objective import total_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "nelbo", "aux", "violation", "lr", "seconds")


def lr_schedule(step: int, peak: float, warmup: int, max_steps: int) -> float:
    """Linear ramp from 0 to ``peak`` over ``warmup`` steps, then cosine to 0."""
    if step < 0 or step > max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    span = max_steps - warmup
    if span <= 0:
        return peak
    return 0.5 * peak * (1.0 + math.cos(math.pi * (step - warmup) / span))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, **hyper)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Rescale so the joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float):
    """Decoupled-weight-decay Adam with bias correction. Updates in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def sample_windows(corpus: np.ndarray, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    if corpus.size < length:
        raise ValueError(f"corpus has {corpus.size} tokens, shorter than one sequence of {length}")
    starts = rng.integers(0, corpus.size - length + 1, size=n)
    return corpus[starts[:, None] + np.arange(length)].astype(np.int64)


@dataclass
class StepMetrics:
    step: int
    nelbo: float
    aux: float
    violation: float
    lr: float
    seconds: float

    def row(self) -> list[str]:
        return [str(self.step), repr(self.nelbo), repr(self.aux), repr(self.violation),
                repr(self.lr), repr(self.seconds)]


@dataclass
class TrainResult:
    model: Denoiser
    optimizer: OptimizerState
    metrics: list[StepMetrics] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _checkpoint(model: Denoiser, opt: OptimizerState, step: int) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(model.cfg, model.params, step, (opt.m, opt.v), model.bias)


def train_step(model: Denoiser, opt: OptimizerState, corpus: np.ndarray, seed: int,
               step: int) -> tuple[StepMetrics, float]:
    """One optimizer step; returns its metrics (without wall time) and the pre-clip norm."""
    cfg = model.cfg
    rng = np.random.default_rng([seed, step])
    x = sample_windows(corpus, cfg.batch_size, cfg.seq_len, rng)
    batch = corrupt(x, sample_t(cfg.batch_size, rng, cfg.eps_t), rng, cfg.mask_id, cfg.eps_t)
    tape = Tape()
    P = model.taped(tape)
    out = model.forward_train(batch, P, rng)
    loss = total_loss(out, batch, cfg)
    names = list(model.params)
    grads = dict(zip(names, tape.gradients(loss.total, [P[n] for n in names])))
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, cfg.max_steps)
    adamw_step(model.params, grads, opt, lr)
    violation = cluster_violation(out.counts)
    if cfg.mode == "dcdm":
        model.bias.step()
    return StepMetrics(step, loss.nelbo.item(), loss.aux_chunk.item(), violation, lr, 0.0), norm


def load_metrics(path) -> list[StepMetrics]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [StepMetrics(int(r[0]), *map(float, r[1:])) for r in reader]


def train(cfg: ModelConfig, corpus: np.ndarray, seed: int | None = None,
          out_dir=None, *, resume=None, stop_after: int | None = None,
          clock: Callable[[], float] = time.perf_counter, log_every: int = 100) -> TrainResult:
    """Run ``cfg.max_steps`` steps (or stop early after ``stop_after``).

    With ``out_dir`` the run writes ``config.txt``, ``metrics.csv`` (flushed
    every step) and ``checkpoints/``. ``resume`` is a checkpoint path whose
    step count the run continues from.
    """
    cfg = cfg.validate()
    seed = cfg.seed if seed is None else seed
    corpus = np.asarray(corpus)
    if corpus.size < cfg.seq_len:
        raise ValueError(f"corpus has {corpus.size} tokens, shorter than one sequence of {cfg.seq_len}")
    if resume is not None:
        saved = ckpt_io.load(resume)
        model = Denoiser(cfg, saved.params, saved.bias)
        opt = OptimizerState(*(saved.moments or ({}, {})), step=saved.step, beta1=cfg.beta1,
                             beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        if saved.moments is None:
            opt = OptimizerState.fresh(model.params, beta1=cfg.beta1, beta2=cfg.beta2,
                                       eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
            opt.step = saved.step
        start = saved.step
    else:
        model = Denoiser(cfg, seed=seed)
        opt = OptimizerState.fresh(model.params, beta1=cfg.beta1, beta2=cfg.beta2,
                                   eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        start = 0
    last = cfg.max_steps if stop_after is None else min(stop_after, cfg.max_steps)
    result = TrainResult(model, opt)

    writer = fh = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        cfg.replace(seed=seed).save(out_dir / "config.txt")
        metrics_path = out_dir / "metrics.csv"
        kept = []
        if start > 0 and metrics_path.exists():
            kept = [r for r in load_metrics(metrics_path) if r.step <= start]
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in kept:
            writer.writerow(r.row())
        fh.flush()

    t0 = clock()
    try:
        for step in range(start + 1, last + 1):
            row, _ = train_step(model, opt, corpus, seed, step)
            row.seconds = clock() - t0
            result.metrics.append(row)
            if writer is not None:
                writer.writerow(row.row())
                fh.flush()
            if log_every and step % log_every == 0:
                log.info("step %d nelbo %.4f aux %.4f violation %.3f lr %.2e",
                         step, row.nelbo, row.aux, row.violation, row.lr)
            if ckpt_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                result.checkpoints.append(
                    ckpt_io.save(_checkpoint(model, opt, step), ckpt_dir / f"step-{step:06d}.ckpt"))
    finally:
        if fh is not None:
            fh.close()
    if ckpt_dir is not None:
        final_step = start + len(result.metrics)
        result.checkpoints.append(
            ckpt_io.save(_checkpoint(model, opt, final_step), ckpt_dir / "final.ckpt"))
    return result
