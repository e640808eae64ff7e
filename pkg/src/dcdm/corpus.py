"""Byte-level tokenization and a synthetic desk corpus.

Tokens are raw UTF-8 bytes (0..255); id 256 is MASK.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MASK_ID = 256
DESK_CORPUS_BYTES = 1_100_000


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    """Bytes back to text; invalid UTF-8 and stray MASK ids are escaped."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > MASK_ID):
        raise ValueError("token ids must lie in [0, 256]")
    out, run = [], []
    for i in ids.tolist():
        if i == MASK_ID:
            out.append(bytes(run).decode("utf-8", errors="backslashreplace"))
            out.append("[MASK]")
            run = []
        else:
            run.append(i)
    out.append(bytes(run).decode("utf-8", errors="backslashreplace"))
    return "".join(out)


def load_corpus(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"{path}: corpus is empty")
    return np.frombuffer(data, dtype=np.uint8).copy()


_SUBJECTS = ["the engineer", "a small robot", "the old map", "my neighbour", "the committee",
             "a quiet student", "the river", "our team", "the library", "a curious cat",
             "the compiler", "the farmer", "this recipe", "the orchestra", "a stray signal"]
_VERBS = ["found", "measured", "ignored", "repaired", "described", "followed", "painted",
          "counted", "borrowed", "carried", "questioned", "sorted", "watched", "built"]
_OBJECTS = ["a broken clock", "the northern bridge", "seven blue jars", "the final report",
            "an empty station", "the winter garden", "two loose wires", "the second chapter",
            "a forgotten letter", "the spare tires", "the tide tables", "a paper lantern"]
_PLACES = ["near the harbour", "after midnight", "in the workshop", "before breakfast",
           "under the stairs", "along the coast", "during the storm", "at the market"]
_LINKS = ["because", "although", "while", "so", "and then", "until"]
_KEYS = ["width", "depth", "count", "ratio", "speed", "price", "weight", "score"]


def _sentence(rng: np.random.Generator) -> str:
    def pick(words):
        return words[rng.integers(len(words))]

    clause = f"{pick(_SUBJECTS)} {pick(_VERBS)} {pick(_OBJECTS)}"
    if rng.random() < 0.5:
        clause += f" {pick(_PLACES)}"
    if rng.random() < 0.35:
        clause += f", {pick(_LINKS)} {pick(_SUBJECTS)} {pick(_VERBS)} {pick(_OBJECTS)}"
    return clause[0].upper() + clause[1:] + rng.choice([".", ".", ".", "!", "?"])


def _record(rng: np.random.Generator) -> str:
    fields = rng.choice(len(_KEYS), size=rng.integers(2, 5), replace=False)
    return "; ".join(f"{_KEYS[i]}={rng.integers(0, 1000)}" for i in sorted(fields))


def synthetic_text(n_bytes: int = DESK_CORPUS_BYTES, seed: int = 0) -> str:
    """Deterministic English-like prose with interleaved key=value records."""
    rng = np.random.default_rng(seed)
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        if rng.random() < 0.15:
            para = _record(rng)
        else:
            para = " ".join(_sentence(rng) for _ in range(rng.integers(2, 7)))
        parts.append(para)
        size += len(para) + 1
    return "\n".join(parts)[:n_bytes] + "\n"


def write_desk_corpus(path, n_bytes: int = DESK_CORPUS_BYTES, seed: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(synthetic_text(n_bytes, seed), encoding="utf-8")
    return path
