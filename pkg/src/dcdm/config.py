"""Model and run configuration, stored as flat ``key=value`` lines.

Blank lines and ``#`` comments are ignored. Unknown keys are an error.
Relative ``corpus`` paths resolve against the config file's directory.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

MODES = ("mdlm", "bdlm", "dcdm")
BYTE_VOCAB = 257  # 256 byte values + MASK


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    # architecture
    mode: str = "dcdm"
    vocab_size: int = BYTE_VOCAB
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 128
    K: int = 8
    h: int = 16
    block_size: int = 8
    init_std: float = 0.02
    mu_skew: float = 1.0
    norm_eps: float = 1e-6
    # objective and routing
    lambda_chunk: float = 1e-2
    gumbel_tau: float = 1.0
    balance_eps: float = 1e-8
    eta_b: float = 1e-3
    bias_interval: int = 1
    eps_t: float = 1e-3
    # optimization
    seq_len: int = 128
    batch_size: int = 16
    max_steps: int = 2000
    lr: float = 3e-4
    warmup_ratio: float = 0.005
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    corpus: str = ""
    seed: int = 0

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_ratio * self.max_steps))

    def validate(self) -> "ModelConfig":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        for key in ("d", "n_layers", "n_heads", "d_ff", "max_len", "seq_len",
                    "batch_size", "max_steps", "bias_interval"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be a positive integer")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size", "needs at least one token plus MASK")
        if self.d % self.n_heads:
            raise ConfigError("n_heads", f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.K < 1:
            raise ConfigError("K", "must be >= 1")
        if not 1 <= self.h <= self.d:
            raise ConfigError("h", f"must satisfy 1 <= h <= d={self.d}")
        if self.block_size < 1:
            raise ConfigError("block_size", "must be >= 1")
        if self.seq_len > self.max_len:
            raise ConfigError("seq_len", f"exceeds max_len={self.max_len}")
        if not 0.0 < self.eps_t < 1.0:
            raise ConfigError("eps_t", "must lie in (0, 1)")
        if self.gumbel_tau <= 0:
            raise ConfigError("gumbel_tau", "must be positive")
        if self.num_layers_after_chunking < 0:
            raise ConfigError("n_layers", "must be >= 1")
        return self

    @property
    def num_layers_after_chunking(self) -> int:
        return self.n_layers - 1

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(key, "unknown key")
            if key in values:
                raise ConfigError(key, "given twice")
            kind = known[key].type
            try:
                if kind == "int":
                    values[key] = int(value)
                elif kind == "float":
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError:
                raise ConfigError(key, f"cannot parse {value!r} as {kind}") from None
        cfg = cls(**values)
        if cfg.corpus and base_dir is not None and not Path(cfg.corpus).is_absolute():
            cfg.corpus = str((base_dir / cfg.corpus).resolve())
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ModelConfig":
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), base_dir=path.parent)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def tiny_reference_config(**changes) -> ModelConfig:
    """The small instance used by the gradient and leakage checks."""
    base = ModelConfig(mode="dcdm", vocab_size=11, d=8, n_layers=2, n_heads=2, d_ff=16,
                       max_len=6, K=3, h=2, block_size=2, seq_len=6, batch_size=2,
                       init_std=0.6)
    return base.replace(**changes) if changes else base.validate()
