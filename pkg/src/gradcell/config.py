"""Flat ``key = value`` run configuration with ``#`` comments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .encoder import EncoderConfig
from .errors import ConfigError, ParseError


@dataclass
class TrainConfig:
    batch_size: int = 512
    mini_batch_size: int = 32
    tau: float = 0.05
    mask_rate: float = 0.15
    w_cl: float = 1.0
    w_mlm: float = 1.0
    w_cls: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    steps: int = 1000
    scheduler: str = "cosine"
    checkpoint_every: int = 0
    redraw_features: bool = False
    train_gene_embeddings: bool = True
    gene_embeddings: str = ""
    log_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1 or self.mini_batch_size < 1:
            raise ConfigError("batch_size and mini_batch_size must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError("mask_rate must lie in (0, 1)")
        weights = (self.w_cl, self.w_mlm, self.w_cls)
        if min(weights) < 0 or not any(weights):
            raise ConfigError("loss weights must be non-negative and not all zero")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("invalid optimizer hyperparameters")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("steps and checkpoint_every must be non-negative")
        if self.scheduler not in ("cosine", "constant"):
            raise ConfigError("scheduler must be 'cosine' or 'constant'")

    @property
    def loss_weights(self):
        return (self.w_cl, self.w_mlm, self.w_cls)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_text(self):
        lines = []
        for section in (self.encoder, self.train):
            for k, v in asdict(section).items():
                if isinstance(v, (list, tuple)):
                    v = ",".join(repr(float(x)) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text, source="<config>"):
    enc_fields = {f.name: f.default for f in fields(EncoderConfig)}
    train_fields = {f.name: f.default for f in fields(TrainConfig)}
    enc, train = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ParseError("expected 'key = value'", source, lineno)
        key, raw = (part.strip() for part in s.split("=", 1))
        if key in enc_fields:
            enc[key] = _coerce(key, raw, enc_fields[key])
        elif key in train_fields:
            train[key] = _coerce(key, raw, train_fields[key])
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return RunConfig(EncoderConfig(**enc), TrainConfig(**train))


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def tiny_run_config(**overrides):
    """Desk-scale settings used by the demos and the smoke tests."""
    enc = dict(n_genes=64, feature_size=16, n_layers=2, n_heads=2, max_seq_len=64,
               dropout_p=0.1, n_random_features=16, attention_mode="favor_plus",
               proj_dim=16, precision="float64")
    train = dict(batch_size=16, mini_batch_size=4, tau=0.5, lr=3e-3, steps=200,
                 scheduler="constant")
    for k, v in overrides.items():
        if k in enc or k in {f.name for f in fields(EncoderConfig)}:
            enc[k] = v
        elif k in {f.name for f in fields(TrainConfig)}:
            train[k] = v
        else:
            raise ConfigError(f"unknown key {k!r}")
    return RunConfig(EncoderConfig(**enc), TrainConfig(**train))
