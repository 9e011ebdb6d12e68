"""Run configuration: nested dataclasses backed by a single YAML file."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import yaml

from .augment import AugPolicy, CPAugConfig
from .data import ConfigError, DomainStyle, SynthConfig
from .losses import LossWeights
from .networks import BackboneConfig, DiscriminatorConfig
from .sar import SARConfig


@dataclass
class DataConfig:
    source: str | None = None
    target_train: str | None = None
    target_test: str | None = None
    layout: str = "png-slices"
    source_val_fraction: float = 0.2


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


@dataclass
class OptimConfig:
    patch_hw: tuple[int, int] = (512, 512)
    batch_size: int = 2
    lr_g: float = 5e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    lr_d: float = 1e-4
    betas_d: tuple[float, float] = (0.9, 0.99)
    max_iters: int = 20000
    z_max: int = 10000
    refresh_every: int | None = None  # pseudo-label refresh period R; None -> z_max / 5
    source_iters: int = 20000
    lr_source: float = 1e-3
    counter_iters: int = 5000
    lr_counter: float = 1e-4
    ckpt_every: int = 0

    @property
    def refresh_period(self) -> int:
        return self.refresh_every or max(1, self.z_max // 5)


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    sigma1: float = 10.0
    sigma2: float = 2.0
    K: int = 8
    # component switches for ablations
    adversarial: bool = True
    detection: bool = True
    counting: bool = True
    pseudo: bool = True


@dataclass
class AugmentConfig:
    policy: AugPolicy = field(default_factory=AugPolicy)
    cp: CPAugConfig = field(default_factory=lambda: CPAugConfig(crop_hw=(256, 256)))
    cp_aug: bool = True


@dataclass
class CounterConfig:
    # input window sides as multiples of the patch side, used in training and averaged at inference
    scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    batch_size: int = 4
    # wider photometric jitter than G1 uses; the counter must transfer as a frozen prior
    policy: AugPolicy = field(default_factory=lambda: AugPolicy(
        blur_prob=0.5, brightness=(-0.12, 0.12), contrast=(0.6, 1.4), gamma=(0.6, 1.6),
        noise_sigma_range=(0.0, 0.08)))


@dataclass
class SARSection:
    enabled: bool = False
    params: SARConfig = field(default_factory=SARConfig)


@dataclass
class EvalConfig:
    tile_hw: tuple[int, int] = (512, 512)
    overlap: int = 64
    nms_radius: float | None = None  # None -> 2 * sigma2
    keep_fraction: float = 0.8
    min_area: int = 64  # at 128 x 128; scaled by image area
    filter: bool = True
    overlays: bool = False


@dataclass
class RunConfig:
    name: str = "wda"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    counter: CounterConfig = field(default_factory=CounterConfig)
    sar: SARSection = field(default_factory=SARSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        o = self.optim
        if o.z_max > o.max_iters:
            raise ConfigError(f"z_max ({o.z_max}) exceeds max_iters ({o.max_iters})")
        for k in ("lr_g", "lr_d", "lr_source", "lr_counter"):
            if getattr(o, k) <= 0:
                raise ConfigError(f"optim.{k} must be positive")
        if o.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        m = self.model.backbone.multiple
        if o.patch_hw[0] % m or o.patch_hw[1] % m:
            raise ConfigError(f"patch {o.patch_hw} must be divisible by {m}")
        self.model.backbone.validate()
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"losses.pseudo": False})``."""
        return apply_overrides(copy.deepcopy(self), overrides)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(tp, value):
    if value is None:
        return None
    origin = get_origin(tp)
    args = [a for a in get_args(tp) if a is not type(None)]
    if is_dataclass(tp):
        return from_dict(tp, value)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v) for v in value)
        return tuple(_coerce(a, v) for a, v in zip(args, value))
    if origin is list:
        return [_coerce(args[0], v) for v in value] if args else list(value)
    if args and origin is not None:  # Optional[...] / unions
        for a in args:
            try:
                return _coerce(a, value)
            except (TypeError, ValueError):
                continue
        return value
    if tp is float and isinstance(value, (int, float)):
        return float(value)
    if tp is int and isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def from_dict(cls, d: dict | None):
    d = d or {}
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v) for k, v in d.items()}
    return cls(**kwargs)


def _set_dotted(obj, key: str, value):
    parts = key.split(".")
    for p in parts[:-1]:
        obj = getattr(obj, p)
    name = parts[-1]
    if not any(f.name == name for f in fields(obj)):
        raise ConfigError(f"unknown config key {key!r}")
    hint = get_type_hints(type(obj))[name]
    setattr(obj, name, _coerce(hint, value))


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for k, v in overrides.items():
        _set_dotted(cfg, k, v)
    return cfg


def parse_override(text: str) -> tuple[str, Any]:
    """``key.path=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    k, v = text.split("=", 1)
    return k.strip(), yaml.safe_load(v)


def full_preset() -> RunConfig:
    return RunConfig(name="full")


def desk_preset() -> RunConfig:
    """CPU-sized preset for 128 x 128 synthetic data."""
    cfg = RunConfig(name="desk")
    cfg.model.backbone = BackboneConfig(depth=3, base_channels=8, block="plain-conv")
    cfg.optim = OptimConfig(
        patch_hw=(64, 64), batch_size=2, lr_g=2.5e-3, max_iters=2000, z_max=1000,
        source_iters=1000, lr_source=2e-3, counter_iters=1500, lr_counter=1e-3,
    )
    cfg.augment.cp = CPAugConfig(crop_hw=(32, 32))
    # count margin follows the patch area: a 64 x 64 patch holds a quarter of the instances of a 128 x 128 one
    cfg.losses.weights = LossWeights(epsilon=0.75)
    cfg.eval = EvalConfig(tile_hw=(128, 128), overlap=64)
    return cfg


PRESETS = {"full": full_preset, "desk": desk_preset}


def load_config(path=None, preset: str = "desk", overrides: dict | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        base = cfg.to_dict()
        _deep_update(base, raw)
        cfg = from_dict(RunConfig, base)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def _deep_update(base: dict, new: dict):
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def config_from_dict(d: dict) -> RunConfig:
    return from_dict(RunConfig, d)


__all__ = [
    "AugmentConfig", "CounterConfig", "DataConfig", "DomainStyle", "EvalConfig", "LossConfig",
    "ModelConfig", "OptimConfig", "RunConfig", "SARSection", "config_from_dict", "desk_preset",
    "dump_config", "full_preset", "load_config", "parse_override",
]
