"""Run configuration.

Serialized as one JSON object with flat dotted keys (``"model.embed_dim": 64``).
Environment variables prefixed ``MOSMOS_`` override file values; a double
underscore stands for the dot (``MOSMOS_FINETUNE__LAM=0.5``).
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

ENV_PREFIX = "MOSMOS_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    pretrain_n: int = 2000
    pretrain_dims: tuple = (32, 32)
    finetune_n: int = 200
    finetune_dims: tuple = (32, 32)
    num_classes: int = 6
    channels: int = 1
    finetune_split: tuple = (0.6, 0.1, 0.3)
    pretrain_split: tuple = (0.9, 0.1)


@dataclass
class ModelConfig:
    encoder: str = "conv"  # conv | patch
    embed_dim: int = 64  # joint space C
    text_dim: int = 64  # C2
    conv_widths: tuple = (16, 32, 64)
    pool_heads: int = 4
    patch_size: int = 8
    vit_dim: int = 64
    vit_depth: int = 2
    vit_heads: int = 4
    text_layers: int = 2
    text_heads: int = 4
    report_len: int = 77  # N
    context_len: int = 16  # N1
    tag_len: int = 10  # N2
    decoder_layers: int = 2
    decoder_heads: int = 4
    init_std: float = 0.02
    init_scheme: str = "trunc_normal(std=0.02)"


@dataclass
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 32  # B1
    lr: float = 2e-3
    tau_init: float = 0.07
    tau_min: float = 0.01
    use_irc: bool = True
    use_mlr: bool = True
    use_prompt: bool = True
    cosine: bool = True  # cosine learning-rate decay over the epochs
    augment: bool = True  # random axis flips (label preserving)


@dataclass
class FinetuneConfig:
    baseline: str = "unet-conv"  # unet-conv | unetr-patch
    lam: float = 0.8
    eps_init: float = 0.07
    epochs: int = 150
    batch_size: int = 8  # B2
    lr: float = 1e-3
    weight_decay: float = 1e-2
    constant_frac: float = 0.01  # 50 of 5000 epochs before cosine decay
    crop: Optional[tuple] = None  # None: whole volume
    overlap: float = 0.5
    window_weighting: str = "uniform"  # uniform | gaussian
    val_every: int = 10
    label_ratio: float = 1.0
    pta_normalization: str = "softmax_tags"  # softmax_tags | raw
    transfer_decoder: bool = True
    use_attention: bool = True
    class_names: Optional[list] = None


@dataclass
class RunConfig:
    stage: str = "finetune"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def validate(self):
        pos = [
            ("model.embed_dim", self.model.embed_dim), ("model.text_dim", self.model.text_dim),
            ("pretrain.batch_size", self.pretrain.batch_size), ("finetune.batch_size", self.finetune.batch_size),
            ("pretrain.tau_init", self.pretrain.tau_init), ("finetune.eps_init", self.finetune.eps_init),
            ("data.num_classes", self.data.num_classes), ("pretrain.lr", self.pretrain.lr),
            ("finetune.lr", self.finetune.lr),
        ]
        for name, value in pos:
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.finetune.lam < 0:
            raise ConfigError(f"finetune.lam must be >= 0, got {self.finetune.lam}")
        if not 0 <= self.finetune.overlap < 1:
            raise ConfigError(f"finetune.overlap must be in [0, 1), got {self.finetune.overlap}")
        if not 0 < self.finetune.label_ratio <= 1:
            raise ConfigError(f"finetune.label_ratio must be in (0, 1], got {self.finetune.label_ratio}")
        if self.model.encoder not in ("conv", "patch"):
            raise ConfigError(f"unknown encoder {self.model.encoder!r}")
        if self.finetune.baseline not in ("unet-conv", "unetr-patch"):
            raise ConfigError(f"unknown baseline {self.finetune.baseline!r}")
        family = {"unet-conv": "conv", "unetr-patch": "patch"}[self.finetune.baseline]
        if family != self.model.encoder:
            raise ConfigError(
                f"baseline {self.finetune.baseline!r} needs model.encoder={family!r}, got {self.model.encoder!r}"
            )
        if self.finetune.pta_normalization not in ("softmax_tags", "raw"):
            raise ConfigError(f"unknown pta_normalization {self.finetune.pta_normalization!r}")
        return self

    # -- flat dotted-key form ------------------------------------------------

    def to_flat(self):
        out = {"stage": self.stage, "seed": self.seed}
        for section in ("data", "model", "pretrain", "finetune"):
            for k, v in asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat, env=None):
        cfg = cls()
        items = dict(_flatten(flat))
        env = os.environ if env is None else env
        for key, raw in env.items():
            if key.startswith(ENV_PREFIX):
                items[key[len(ENV_PREFIX):].lower().replace("__", ".")] = _parse_env(raw)
        for key, value in items.items():
            cfg.set(key, value)
        return cfg.validate()

    def set(self, key, value):
        parts = key.split(".")
        target = self
        for p in parts[:-1]:
            if not hasattr(target, p) or not is_dataclass(getattr(target, p)):
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(target, p)
        name = parts[-1]
        known = {f.name: f for f in fields(target)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        elif name == "crop" and isinstance(value, list):
            value = tuple(value)
        setattr(target, name, value)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path, env=None):
        return cls.from_flat(json.loads(Path(path).read_text()), env=env)


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in ("data", "model", "pretrain", "finetune"):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _parse_env(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
