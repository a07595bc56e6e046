"""JSON run configuration with dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    shape: str = "sphere"
    prim_count: int = 2000
    texture_seed: int = 0
    path: str = ""  # base PLY; overrides the synthetic scene settings when set


@dataclass
class RigConfig:
    cameras: int = 32
    heldout: int = 8
    radius: float = 3.5
    fov_deg: float = 50.0
    checking_index: int = 0


@dataclass
class PayloadConfig:
    kind: str = "image"  # image | bits
    source: str = "pattern"  # pattern | emoji | png (image kind); ignored for bits
    path: str = ""
    seed: int = 0
    bits: int = 64
    null_value: float = 0.5


@dataclass
class ModelConfig:
    d: int = 32
    hidden: int = 64
    pe_freqs: int = 4
    heads: int = 1
    patch_size: int = 8
    hidden_resolution: int = 64
    deltas: list = field(default_factory=lambda: ["color", "opacity"])
    encoder: str = "builtin_random"  # builtin_random | file_import
    feature_file: str = ""
    injection: str = "cross_attention"  # cross_attention | concat_mlp
    decoder_widths: list = field(default_factory=lambda: [16, 32, 64])
    decoder_pos_freqs: int = 4
    max_bits: int = 128
    init_seed: int = 0


@dataclass
class HarmonizeConfig:
    enabled: bool = True
    granularity: str = "group"  # group | element
    scope: str = "theta+phi"  # theta | theta+phi


@dataclass
class TrainConfig:
    steps: int = 1000
    views_per_step: int = 4
    resolution: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lambda_dec_pos: float = 0.3
    lambda_dec_neg: float = 1.0
    lambda_rgb: float = 0.1
    dec_loss: str = "l2"  # l2 | l1 (norm of the two recovery terms)
    harmonize: HarmonizeConfig = field(default_factory=HarmonizeConfig)
    augmentation: str = "off"  # off | blur | jpeg_approx
    tile_size: int = 16
    seed: int = 0
    checkpoint_every: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 50


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    payload: PayloadConfig = field(default_factory=PayloadConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "Config":
        t, m, p = self.train, self.model, self.payload
        if t.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if t.views_per_step < 1:
            raise ConfigError("train.views_per_step must be >= 1")
        if t.views_per_step > self.rig.cameras - 1:
            raise ConfigError("train.views_per_step exceeds the non-checking cameras in the rig")
        if min(t.lambda_dec_pos, t.lambda_dec_neg, t.lambda_rgb) < 0 or \
                max(t.lambda_dec_pos, t.lambda_dec_neg, t.lambda_rgb) <= 0:
            raise ConfigError("loss weights must be non-negative with at least one positive")
        if t.harmonize.granularity not in ("group", "element"):
            raise ConfigError(f"unknown harmonize.granularity {t.harmonize.granularity!r}")
        if t.harmonize.scope not in ("theta", "theta+phi"):
            raise ConfigError(f"unknown harmonize.scope {t.harmonize.scope!r}")
        if t.dec_loss not in ("l1", "l2"):
            raise ConfigError(f"unknown train.dec_loss {t.dec_loss!r}")
        if t.augmentation not in ("off", "blur", "jpeg_approx"):
            raise ConfigError(f"unknown train.augmentation {t.augmentation!r}")
        if t.resolution != 2 * m.hidden_resolution:
            raise ConfigError("train.resolution must be twice model.hidden_resolution")
        if p.kind not in ("image", "bits"):
            raise ConfigError(f"unknown payload.kind {p.kind!r}")
        if p.kind == "bits" and not 0 < p.bits <= m.max_bits:
            raise ConfigError(f"payload.bits must be in 1..{m.max_bits}")
        if m.encoder not in ("builtin_random", "file_import"):
            raise ConfigError(f"unknown model.encoder {m.encoder!r}")
        if m.encoder == "file_import" and not m.feature_file:
            raise ConfigError("model.encoder=file_import needs model.feature_file")
        if m.injection not in ("cross_attention", "concat_mlp"):
            raise ConfigError(f"unknown model.injection {m.injection!r}")
        if not 0 <= self.rig.checking_index < self.rig.cameras:
            raise ConfigError("rig.checking_index out of range")
        if t.tile_size not in (8, 16, 32):
            raise ConfigError("train.tile_size must be 8, 16 or 32")
        return self


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object at '{path or '<root>'}'")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) at '{path or '<root>'}': {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, where)
        else:
            kwargs[name] = _coerce(current, value, where)
    return cls(**kwargs)


def _coerce(current: Any, value: Any, where: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return list(value)
    return value


def config_from_dict(data: dict) -> Config:
    return _build(Config, data).validate()


def load_config(path: str) -> Config:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def apply_overrides(cfg: Config, overrides) -> Config:
    """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
    data = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def dump_config(cfg: Config) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
