"""Self-checks behind ``dcdm verify``: gradients, leakage, and mode degeneracy."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import masks
from .autodiff import finite_difference_check
from .chunking import gumbel_noise
from .config import ModelConfig, tiny_reference_config
from .model import Denoiser
from .noise import corrupt
from .objective import total_loss

GRADCHECK_TOL = 1e-5
LEAK_TOL = 1e-12
DEGENERATE_TOL = 1e-12


@dataclass
class Report:
    mode: str
    passed: bool
    seconds: float
    details: dict = field(default_factory=dict)


def _reference_instance(cfg: ModelConfig, seed: int):
    model = Denoiser(cfg, seed=seed)
    rng = np.random.default_rng([seed, 1])
    x = rng.integers(0, cfg.mask_id, size=(cfg.batch_size, cfg.seq_len))
    t = np.linspace(0.5, 0.9, cfg.batch_size)
    batch = corrupt(x, t, rng, cfg.mask_id, cfg.eps_t)
    gumbel = gumbel_noise((cfg.batch_size, cfg.seq_len, cfg.K), rng)
    return model, batch, gumbel


def gradcheck(seed: int = 0, step: float = 1e-5, cfg: ModelConfig | None = None) -> Report:
    """Central differences against the tape on the full dcdm loss.

    The Gumbel draws are pinned and the straight-through sample is replaced by
    its softmax surrogate, whose gradient is exactly what straight-through
    back-propagates; the hard forward itself is piecewise constant.
    """
    start = time.perf_counter()
    cfg = cfg or tiny_reference_config()
    model, batch, gumbel = _reference_instance(cfg, seed)
    names = list(model.params)

    def loss(*tensors):
        out = model.forward_train(batch, dict(zip(names, tensors)), gumbel=gumbel,
                                  relaxed=True, track=False)
        return total_loss(out, batch, cfg).total

    err = finite_difference_check(loss, [model.params[n] for n in names], step)
    return Report("gradcheck", err < GRADCHECK_TOL, time.perf_counter() - start,
                  {"max_rel_error": err, "tolerance": GRADCHECK_TOL, "seed": seed,
                   "parameters": model.num_parameters()})


# leakage --------------------------------------------------------------------

def sabotaged_training_mask(c, nu) -> np.ndarray:
    """Training mask with the noisy->clean clause widened to the query's own chunk."""
    c = np.asarray(c)
    allow = masks.joint_training_mask(c, nu).allow.copy()
    L = c.shape[0]
    allow[:L, L:] |= c[:, None] >= c[None, :]
    return allow


def random_instance(rng: np.random.Generator, max_len: int = 16):
    L = int(rng.integers(1, max_len + 1))
    n_chunks = int(rng.integers(1, L + 1))
    c = rng.integers(1, n_chunks + 1, size=L)
    nu = (rng.random(L) < rng.random()).astype(np.int64)
    return c, nu


def fuzz_masks(n: int, seed: int, sabotage: bool = False, max_len: int = 16) -> dict:
    rng = np.random.default_rng(seed)
    failures = 0
    example = None
    for _ in range(n):
        c, nu = random_instance(rng, max_len)
        allow = sabotaged_training_mask(c, nu) if sabotage else masks.joint_training_mask(c, nu)
        verdict = masks.verify_no_leakage(allow, c, nu)
        if not verdict.clean:
            failures += 1
            if example is None:
                example = {"c": c.tolist(), "nu": nu.tolist(), "source": verdict.source,
                           "victim": verdict.victim, "path": verdict.path}
    return {"cases": n, "violations": failures, "first_violation": example}


def perturbation_tests(n: int, seed: int, max_len: int = 16) -> dict:
    """Change a clean token behind a mask; logits it must not inform stay put."""
    cfg = tiny_reference_config(max_len=max_len, seq_len=max_len, batch_size=1)
    model = Denoiser(cfg, seed=seed)
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    failures = 0
    checked = 0
    moved = 0  # unguarded masked logits that did react: the perturbation is live
    for i in range(n):
        L = int(rng.integers(2, max_len + 1))
        x = rng.integers(0, cfg.mask_id, size=(1, L))
        batch = corrupt(x, rng.uniform(0.2, 0.9), rng, cfg.mask_id)
        masked = np.flatnonzero(batch.nu[0])
        if masked.size == 0:
            batch.nu[0, 0] = 1
            batch.z_t[0, 0] = cfg.mask_id
            masked = np.array([0])
        routed = i % 2 == 0
        chunks = None if routed else rng.integers(1, L + 1, size=(1, L))
        gumbel = gumbel_noise((1, L, cfg.K), rng)
        base = model.forward_train(batch, gumbel=gumbel, chunks=chunks, track=False)
        c = base.chunks[0]
        m = int(rng.choice(masked))
        bumped = batch.x.copy()
        bumped[0, m] = (bumped[0, m] + 1 + rng.integers(cfg.mask_id - 1)) % cfg.mask_id
        other = type(batch)(bumped, batch.z_t, batch.nu, batch.t, batch.weight)
        after = model.forward_train(other, gumbel=gumbel, chunks=chunks, track=False)
        if not np.array_equal(after.chunks[0], c):
            failures += 1
            continue
        guarded = [l for l in masked if c[l] <= c[m]]
        if guarded:
            diff = float(np.abs(after.logits.data[0, guarded] - base.logits.data[0, guarded]).max())
            worst = max(worst, diff)
            checked += len(guarded)
            if diff > LEAK_TOL:
                failures += 1
        exposed = [l for l in masked if c[l] > c[m]]
        if exposed:
            moved += int(np.any(after.logits.data[0, exposed] != base.logits.data[0, exposed]))
    return {"cases": n, "violations": failures, "max_logit_change": worst,
            "guarded_positions": checked, "cases_with_downstream_change": moved}


def leakage(seed: int = 0, fuzz_cases: int = 1000, perturb_cases: int = 100,
            sabotage: bool = False) -> Report:
    start = time.perf_counter()
    fuzz = fuzz_masks(fuzz_cases, seed, sabotage)
    pert = perturbation_tests(perturb_cases, seed) if not sabotage else None
    passed = fuzz["violations"] == 0 and (pert is None or pert["violations"] == 0)
    details = {"fuzz": fuzz, "sabotage": sabotage}
    if pert is not None:
        details["perturbation"] = pert
    return Report("leakage", passed, time.perf_counter() - start, details)


# degeneracy -----------------------------------------------------------------

def degenerate(seed: int = 0) -> Report:
    """dcdm with positional routing vs bdlm, and dcdm at K=1 vs mdlm."""
    start = time.perf_counter()
    base = tiny_reference_config(max_len=12, seq_len=12, batch_size=3)
    rng = np.random.default_rng([seed, 3])
    x = rng.integers(0, base.mask_id, size=(base.batch_size, base.seq_len))
    batch = corrupt(x, rng.uniform(0.2, 0.9, base.batch_size), rng, base.mask_id)

    dcdm = Denoiser(base.replace(mode="dcdm"), seed=seed)
    bdlm = Denoiser(base.replace(mode="bdlm"), dcdm.params)
    out_d = dcdm.forward_train(batch, chunks="positional", track=False)
    out_b = bdlm.forward_train(batch, track=False)
    masks_equal = bool(np.array_equal(masks.batch_training_masks(out_d.chunks, batch.nu),
                                      masks.batch_training_masks(out_b.chunks, batch.nu)))
    gap_bdlm = abs(total_loss(out_d, batch, dcdm.cfg).total.item()
                   - total_loss(out_b, batch, bdlm.cfg).total.item())

    one = Denoiser(base.replace(mode="dcdm", K=1), seed=seed)
    mdlm = Denoiser(base.replace(mode="mdlm", K=1), one.params)
    loss_one = total_loss(one.forward_train(batch, rng=np.random.default_rng(seed), track=False),
                          batch, one.cfg)
    loss_mdlm = total_loss(mdlm.forward_train(batch, track=False), batch, mdlm.cfg)
    gap_mdlm = abs(loss_one.nelbo.item() - loss_mdlm.nelbo.item())

    passed = masks_equal and gap_bdlm <= DEGENERATE_TOL and gap_mdlm <= DEGENERATE_TOL
    return Report("degenerate", passed, time.perf_counter() - start,
                  {"masks_equal": masks_equal, "bdlm_total_gap": gap_bdlm,
                   "mdlm_nelbo_gap": gap_mdlm, "tolerance": DEGENERATE_TOL,
                   "k1_aux": loss_one.aux_chunk.item()})
