"""Command-line entry point: ``dcdm <command> ...``.

Exit status: 0 success, 1 verification failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import verify as checks
from .config import ConfigError, ModelConfig
from .corpus import DESK_CORPUS_BYTES, decode, encode, load_corpus, write_desk_corpus
from .model import Denoiser
from .noise import corrupt, sample_t
from .objective import total_loss
from .sampler import SampleJob, generate
from .trainer import sample_windows, train

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_config(path) -> ModelConfig:
    try:
        return ModelConfig.load(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None


def _corpus_for(cfg: ModelConfig, override: str | None = None) -> np.ndarray:
    path = override or cfg.corpus
    if not path:
        raise ConfigError("corpus", "no corpus path given")
    if not Path(path).is_file():
        raise ConfigError("corpus", f"file not found: {path}")
    corpus = load_corpus(path)
    if corpus.size < cfg.seq_len:
        raise ConfigError("corpus", f"{corpus.size} bytes is shorter than seq_len={cfg.seq_len}")
    return corpus


def _load_model(path) -> Denoiser:
    try:
        saved = ckpt_io.load(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except ckpt_io.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    return Denoiser(saved.config, saved.params, saved.bias)


def _tail_mean(rows, key: str) -> float:
    tail = rows[-max(1, len(rows) // 10):]
    return float(np.mean([getattr(r, key) for r in tail]))


# commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(max_steps=args.steps)
    corpus = _corpus_for(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    result = train(cfg, corpus, seed, args.out, resume=args.resume)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"step {last.step} nelbo {last.nelbo:.4f} violation {last.violation:.3f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model = _load_model(args.checkpoint)
    length = args.length or model.cfg.seq_len
    if length > model.cfg.max_len:
        raise UsageError(f"--length {length} exceeds the model's max_len={model.cfg.max_len}")
    job = SampleJob(encode(args.prompt), length, args.steps, args.temperature, args.seed,
                    reroute=args.reroute)
    tokens = generate(job, model)
    sys.stdout.write(decode(tokens) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    cfg = model.cfg
    corpus = _corpus_for(cfg, args.corpus)
    values = []
    for i in range(args.batches):
        rng = np.random.default_rng([args.seed, i])
        x = sample_windows(corpus, cfg.batch_size, cfg.seq_len, rng)
        batch = corrupt(x, sample_t(cfg.batch_size, rng, cfg.eps_t), rng, cfg.mask_id, cfg.eps_t)
        out = model.forward_train(batch, rng=rng, track=False)
        values.append(total_loss(out, batch, cfg).nelbo.item())
    report = {"nelbo": float(np.mean(values)), "batches": args.batches, "mode": cfg.mode}
    print(json.dumps(report) if args.json else f"nelbo {report['nelbo']:.4f} over {args.batches} batches")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.mode == "gradcheck":
        report = checks.gradcheck(args.seed)
    elif args.mode == "leakage":
        report = checks.leakage(args.seed, sabotage=args.sabotage)
    else:
        report = checks.degenerate(args.seed)
    if args.json:
        print(json.dumps({"mode": report.mode, "passed": report.passed,
                          "seconds": report.seconds, **report.details}, default=str))
    else:
        print(f"{report.mode}: {'pass' if report.passed else 'FAIL'} ({report.seconds:.1f}s)")
        for key, value in report.details.items():
            print(f"  {key}: {value}")
        if args.mode == "leakage" and not report.passed:
            bad = report.details["fuzz"]["first_violation"]
            if bad is not None:
                hops = " -> ".join(f"{half}[{pos}]" for half, pos in bad["path"])
                print(f"  leaking path: {hops}")
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_ablate_k(args) -> int:
    from .plots import curves_svg

    cfg = _load_config(args.config)
    corpus = _corpus_for(cfg)
    ks = [int(k) for k in args.k_list.split(",") if k.strip()]
    hs = [int(h) for h in args.h_list.split(",") if h.strip()] if args.h_list else [cfg.h]
    if not ks or not hs:
        raise UsageError("--k-list and --h-list need at least one value")
    out = Path(args.out)
    rows, curves = [], {}
    for K in ks:
        for h in hs:
            run_cfg = cfg.replace(mode="dcdm", K=K, h=h, max_steps=args.steps)
            result = train(run_cfg, corpus, args.seed, out / f"K{K}_h{h}", log_every=0)
            label = f"K={K} h={h}"
            curves[label] = result.metrics
            rows.append((K, h, args.steps, _tail_mean(result.metrics, "nelbo"),
                         _tail_mean(result.metrics, "violation")))
            print(f"{label}: nelbo {rows[-1][3]:.4f} violation {rows[-1][4]:.3f}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["K", "h", "steps", "final_nelbo", "final_violation"])
        writer.writerows([(K, h, s, repr(n), repr(v)) for K, h, s, n, v in rows])
    curves_svg(out / "plots" / "ablation.svg", curves, "subspace routing ablation")
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_inspect_chunks(args) -> int:
    model = _load_model(args.checkpoint)
    ids = encode(args.text)
    if ids.size > model.cfg.max_len:
        raise UsageError(f"text is {ids.size} bytes, longer than max_len={model.cfg.max_len}")
    chunks = model.forward_infer(ids, model.cfg.eps_t).chunks[0] if ids.size else np.zeros(0, int)
    hist = Counter(chunks.tolist())
    if args.json:
        print(json.dumps({"bytes": ids.tolist(), "chunks": chunks.tolist(),
                          "histogram": {str(k): hist[k] for k in sorted(hist)}}))
        return EXIT_OK
    for pos, (b, c) in enumerate(zip(ids.tolist(), chunks.tolist())):
        print(f"{pos:4d}  {decode([b])!r:>8}  {c}")
    for k in sorted(hist):
        print(f"chunk {k}: {hist[k]}")
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    path = write_desk_corpus(args.out, args.bytes, args.seed)
    print(f"wrote {path} ({path.stat().st_size} bytes)")
    return EXIT_OK


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcdm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override max_steps")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--length", type=int)
    p.add_argument("--steps", type=int, default=8, help="denoising rounds per chunk")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reroute", action="store_true", help="experimental per-chunk re-routing")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="mean NELBO of a checkpoint on random corpus windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="gradient, leakage and degeneracy checks")
    p.add_argument("--mode", required=True, choices=["gradcheck", "leakage", "degenerate"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sabotage", action="store_true",
                   help="leakage only: widen the noisy->clean clause to show a detected leak")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate-k", help="train one dcdm model per (K, h) pair")
    p.add_argument("config")
    p.add_argument("--k-list", required=True)
    p.add_argument("--h-list")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_k)

    p = sub.add_parser("inspect-chunks", help="show the chunk id of every byte of a text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect_chunks)

    p = sub.add_parser("make-corpus", help="write the synthetic desk corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--bytes", type=int, default=DESK_CORPUS_BYTES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
