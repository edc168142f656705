"""Model / training configuration and the flat ``key=value`` run file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


@dataclass
class ModelConfig:
    # normalization / tokenization
    T_norm: int = 100
    A: int = 8
    C_norm: int = 32
    t: int = 10
    d: int = 64
    d_text: int = 384
    # encoder
    n_layers: int = 4
    n_heads: int = 8
    window: int = 10
    d_ff: int = 256
    dropout: float = 0.1
    scale_scores: bool = True
    ila_norm: bool = True
    ln_eps: float = 1e-5
    # heads
    recon_hidden: int = 64
    head_hidden: int = 64
    head_pool_t: bool = False
    # reconstruction target: "token" (assembled tokens) or "spike" (X_emb only)
    target: str = "token"

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.T_norm % self.t:
            raise ValueError(f"T_norm={self.T_norm} not divisible by t={self.t}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.target not in ("token", "spike"):
            raise ValueError(f"unknown target {self.target!r}")

    @property
    def N(self) -> int:
        return self.T_norm // self.t

    @property
    def S(self) -> int:
        return self.N * self.A

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 5e-4
    lr_min: float = 1e-5
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_ratio: float = 0.5
    clip_norm: float = 0.0
    seed: int = 0


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    lr_min: float = 1e-4
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0
    seed: int = 0


def _coerce(value: str, typ):
    if typ is bool or typ == "bool":
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ is int or typ == "int":
        return int(value)
    if typ is float or typ == "float":
        return float(value)
    return value


@dataclass
class RunConfig:
    """Every knob of a run, flat.  Defaults reproduce the reference table."""

    # model
    T_norm: int = 100
    A: int = 8
    C_norm: int = 32
    t: int = 10
    d: int = 64
    d_text: int = 384
    n_layers: int = 4
    n_heads: int = 8
    window: int = 10
    d_ff: int = 256
    dropout: float = 0.1
    scale_scores: bool = True
    ila_norm: bool = True
    ln_eps: float = 1e-5
    recon_hidden: int = 64
    head_hidden: int = 64
    head_pool_t: bool = False
    target: str = "token"
    # pretraining
    epochs: int = 40
    batch_size: int = 128
    lr: float = 5e-4
    lr_min: float = 1e-5
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_ratio: float = 0.5
    clip_norm: float = 0.0
    # fine-tuning
    ft_epochs: int = 50
    ft_batch_size: int = 64
    ft_lr: float = 1e-4
    # data / split
    split_mode: str = "multi_day"
    train_fraction: float = 0.8
    shuffle_channels: bool = False
    # runtime
    seed: int = 0
    dtype: str = "float32"
    threads: int = 1

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, **kv) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        for k, v in kv.items():
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            if isinstance(v, str):
                v = _coerce(v, types[k])
            setattr(self, k, v)
        return self

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(getattr(self, k))}\n" for k in self.keys())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        kv = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        return cls().update(**kv)

    def model(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: getattr(self, k) for k in names})

    def train(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(epochs=self.ft_epochs, batch_size=self.ft_batch_size,
                              lr=self.ft_lr, lr_min=self.ft_lr,
                              weight_decay=self.weight_decay, beta1=self.beta1,
                              beta2=self.beta2, adam_eps=self.adam_eps,
                              clip_norm=self.clip_norm, seed=self.seed)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)
