"""Model, training and generator configuration plus the key=value config format.

A config file holds one ``key = value`` per line; ``#`` starts a comment.
Keys are dataclass field names, optionally qualified by section
(``encoder.channels = 32``). Tuples are written comma-separated.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

VARIANTS = ("full", "sum", "no_shape", "pre_shape", "no_ope", "no_att")


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 128  # H_IN = W_IN
    feature_size: int = 16  # h = w
    channels: int = 32  # d
    layers: int = 3
    heads: int = 8
    ffn_hidden: int = 128
    dropout: float = 0.1
    backbone_widths: tuple = (8, 16, 32, 64)

    def validate(self):
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.channels % 4:
            raise ValueError("channels must be a multiple of 4 for 2-D sine positional encodings")
        if self.feature_size < 1 or self.input_size < 1:
            raise ValueError("sizes must be positive")
        if len(self.backbone_widths) != 4 or min(self.backbone_widths) < 1:
            raise ValueError(f"backbone_widths must be four positive ints, got {self.backbone_widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.input_size % 16:
            raise ValueError("input_size must be divisible by 16 (backbone strides)")
        return self


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prototype_size: int = 3  # s
    iterations: int = 3  # L
    zero_shot_queries: int = 3
    shape_hidden: int = 64
    shared_iterations: bool = True
    output_norm: bool = True  # final LayerNorm on encoder output and on every adapted prototype
    decoder_widths: tuple = (32, 16, 8)
    leaky_slope: float = 0.01
    variant: str = "full"

    def validate(self):
        self.encoder.validate()
        if self.prototype_size < 1 or self.prototype_size % 2 == 0:
            raise ValueError(f"prototype_size must be odd and positive, got {self.prototype_size}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.zero_shot_queries < 1:
            raise ValueError("zero_shot_queries must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.decoder_widths) != 3:
            raise ValueError("decoder_widths needs three entries")
        if self.encoder.feature_size * 8 != self.encoder.input_size:
            raise ValueError(
                f"decoder upsamples 8x: feature_size {self.encoder.feature_size} * 8 != input_size {self.encoder.input_size}"
            )
        return self

    def digest(self):
        return hashlib.sha1(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class TrainConfig:
    aux_weight: float = 0.3  # lambda_AUX
    lr: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    shots: int = 3  # exemplars used per image: 3 few-shot, 1 one-shot, 0 zero-shot
    hflip: bool = True
    freeze_backbone: bool = False
    val_every: int = 1
    gt_sigma_ratio: float = 1.0  # gt Gaussian std / kernel size
    zero_shot_kernel: float = 1.7  # gt kernel size in pixels when no exemplars exist (a typical object / 8)

    def validate(self):
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")
        for name in ("lr", "clip_norm", "epochs", "batch_size", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gt_sigma_ratio <= 0:
            raise ValueError("gt_sigma_ratio must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.shots not in (0, 1, 3):
            raise ValueError("shots must be 0, 1 or 3")
        return self


def toy_model_config(**kw):
    """The gradient-check scale model: H_IN=32, h=4, d=16, s=3, L=2."""
    enc = EncoderConfig(input_size=32, feature_size=4, channels=16, layers=1, heads=4, ffn_hidden=32,
                        backbone_widths=(4, 4, 8, 8))
    base = ModelConfig(encoder=enc, iterations=2, decoder_widths=(8, 8, 4), shape_hidden=16)
    return replace(base, **kw).validate()


def _coerce(raw, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        kind = type(current[0]) if current else float
        return tuple(kind(x) for x in raw.split(",") if x.strip())
    return raw


def apply_overrides(cfg, items):
    """Return a copy of dataclass ``cfg`` with ``{key: str}`` overrides applied.

    Nested dataclasses are addressed with dots. Unknown keys raise KeyError.
    """
    nested = {}
    flat = {}
    names = {f.name for f in fields(cfg)}
    for key, raw in items.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise KeyError(f"unknown config key {key!r}")
        if rest:
            nested.setdefault(head, {})[rest] = raw
        else:
            flat[head] = _coerce(raw, getattr(cfg, head))
    for head, sub in nested.items():
        flat[head] = apply_overrides(getattr(cfg, head), sub)
    return replace(cfg, **flat)


def parse_kv(text, source="<config>"):
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def split_sections(items):
    """Route flat keys to model / train / data sections.

    ``model.*``, ``train.*`` and ``data.*`` prefixes are explicit; bare keys
    are matched against TrainConfig, then ModelConfig, then EncoderConfig.
    """
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    enc_keys = {f.name for f in fields(EncoderConfig)}
    out = {"model": {}, "train": {}, "data": {}}
    for k, v in items.items():
        head, _, rest = k.partition(".")
        if head in out and rest:
            out[head][rest] = v
        elif k in train_keys:
            out["train"][k] = v
        elif k in model_keys or head == "encoder":
            out["model"][k] = v
        elif k in enc_keys:
            out["model"][f"encoder.{k}"] = v
        else:
            raise KeyError(f"unknown config key {k!r}")
    return out


def to_dict(cfg):
    return asdict(cfg)


def model_config_from_dict(d):
    d = dict(d)
    enc = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("encoder").items()})
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return ModelConfig(encoder=enc, **d).validate()


def train_config_from_dict(d):
    return TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}).validate()
