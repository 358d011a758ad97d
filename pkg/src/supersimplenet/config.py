"""Configuration dataclasses, YAML loading and dotted-path overrides."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple

import yaml

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Default resolutions per dataset family / category (H, W).
DEFAULT_RESOLUTIONS = {
    "mvtec_like": (256, 256),
    "visa_like": (256, 256),
    "ksdd2": (232, 640),
    "sensum/capsule": (192, 320),
    "sensum/softgel": (144, 144),
}

# Perlin thresholds: thinner anomalies everywhere except MVTec-like data.
DEFAULT_PERLIN_THRESHOLDS = {
    "mvtec_like": 0.2,
    "visa_like": 0.6,
    "ksdd2": 0.6,
    "sensum": 0.6,
}


class ConfigError(ValueError):
    """Raised for invalid or unparseable configuration."""


@dataclass
class BackboneSpec:
    name: str = "wide_resnet50_2"
    layer_indices: Tuple[int, ...] = (2, 3)
    # "imagenet" (pinned torchvision release), "random" (seeded init), or a checkpoint path
    weights: str = "imagenet"
    seed: int = 0
    upscale: bool = True
    frozen: bool = True

    def validate(self):
        idx = list(self.layer_indices)
        if not idx:
            raise ConfigError("backbone.layer_indices must be non-empty")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError(f"backbone.layer_indices must be strictly increasing, got {idx}")
        if any(i not in (1, 2, 3, 4) for i in idx):
            raise ConfigError(f"backbone.layer_indices must be within 1..4, got {idx}")
        if not self.frozen:
            raise ConfigError("backbone.frozen must be true")


@dataclass
class NoiseConfig:
    gauss_mu: float = 0.0
    gauss_sigma: float = 0.015
    perlin_threshold: float = 0.6
    perlin_max_exponent: int = 5
    perlin_octaves: int = 1
    anomaly_probability: float = 0.5
    duplicate_features: bool = True
    overlap_allowed: bool = False
    generator_style: str = "perlin_masked"  # perlin_masked | simplenet_full_copy
    synthetic_enabled: bool = True

    def validate(self):
        if self.gauss_sigma < 0:
            raise ConfigError("noise.gauss_sigma must be >= 0")
        if not -1.0 < self.perlin_threshold < 1.0:
            raise ConfigError("noise.perlin_threshold must lie in (-1, 1)")
        if not 0.0 <= self.anomaly_probability <= 1.0:
            raise ConfigError("noise.anomaly_probability must lie in [0, 1]")
        if self.generator_style not in ("perlin_masked", "simplenet_full_copy"):
            raise ConfigError(f"unknown noise.generator_style {self.generator_style!r}")


@dataclass
class HeadConfig:
    adaptor_channels: Optional[int] = None  # None: inferred from the backbone
    seg_hidden: int = 1024
    cls_channels: int = 128
    cls_conv_kernel: int = 5
    cls_enabled: bool = True
    stop_grad_to_seg: Optional[bool] = None  # None: true iff unsupervised

    def validate(self):
        if self.seg_hidden < 1 or self.cls_channels < 1:
            raise ConfigError("head widths must be >= 1")
        if self.adaptor_channels is not None and self.adaptor_channels < 1:
            raise ConfigError("head.adaptor_channels must be >= 1")


@dataclass
class LossConfig:
    th: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: Optional[float] = None
    seg_focal: bool = True
    clip_grad_norm: Optional[float] = None  # None: 1.0 if supervised else off

    def validate(self):
        if self.th <= 0:
            raise ConfigError("loss.th must be > 0")
        if self.focal_gamma < 0:
            raise ConfigError("loss.focal_gamma must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr_adaptor: float = 1e-4
    lr_heads: float = 2e-4
    weight_decay: float = 1e-5
    scheduler_milestones: List[int] = field(default_factory=lambda: [240, 270])
    scheduler_gamma: float = 0.4
    cache_features: bool = False
    # re-estimate head batch-norm statistics after the last epoch; short runs
    # otherwise keep running stats dominated by their initial values
    recalibrate_bn: bool = False
    snapshot_every: int = 0
    log_every: int = 1
    device: Optional[str] = None

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if self.lr_adaptor <= 0 or self.lr_heads <= 0:
            raise ConfigError("learning rates must be positive")
        if any(m >= self.epochs for m in self.scheduler_milestones):
            raise ConfigError(
                f"scheduler milestones {self.scheduler_milestones} must be < epochs ({self.epochs})"
            )


@dataclass
class DatasetSpec:
    family: str = "mvtec_like"  # mvtec_like | visa_like | ksdd2 | sensum
    root: str = ""
    category: str = ""
    resolution: Optional[Tuple[int, int]] = None
    supervision: str = "unsupervised"  # unsupervised | supervised
    fold: Optional[int] = None
    split_file: Optional[str] = None

    def resolved_resolution(self) -> Tuple[int, int]:
        if self.resolution is not None:
            return tuple(int(v) for v in self.resolution)
        key = f"{self.family}/{self.category}" if self.family == "sensum" else self.family
        if key not in DEFAULT_RESOLUTIONS:
            raise ConfigError(f"no default resolution for {key!r}; set dataset.resolution")
        return DEFAULT_RESOLUTIONS[key]

    def validate(self):
        if self.family not in ("mvtec_like", "visa_like", "ksdd2", "sensum"):
            raise ConfigError(f"unknown dataset family {self.family!r}")
        if self.supervision not in ("unsupervised", "supervised"):
            raise ConfigError(f"unknown supervision mode {self.supervision!r}")
        h, w = self.resolved_resolution()
        # 8, not 32: the KSDD2 protocol height (232) is only divisible by 8
        if h % 8 or w % 8:
            raise ConfigError(f"resolution {(h, w)} must be divisible by 8")
        if self.family == "sensum" and self.fold not in (0, 1, 2):
            raise ConfigError("sensum requires dataset.fold in {0, 1, 2}")


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"
    seeds: List[int] = field(default_factory=lambda: [0])
    categories: List[str] = field(default_factory=list)
    export_overlays: bool = False
    export_masks: bool = False

    @property
    def supervised(self) -> bool:
        return self.dataset.supervision == "supervised"

    @property
    def stop_grad_to_seg(self) -> bool:
        if self.head.stop_grad_to_seg is None:
            return not self.supervised
        return bool(self.head.stop_grad_to_seg)

    @property
    def clip_grad_norm(self) -> Optional[float]:
        if self.loss.clip_grad_norm is None:
            return 1.0 if self.supervised else None
        return self.loss.clip_grad_norm if self.loss.clip_grad_norm > 0 else None

    def validate(self) -> "RunConfig":
        for part in (self.dataset, self.backbone, self.noise, self.head, self.loss, self.train):
            part.validate()
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build from a nested dict; an unset noise.perlin_threshold follows the dataset family."""
        cfg = _build(cls, data or {}, "")
        noise = (data or {}).get("noise") or {}
        if "perlin_threshold" not in noise and cfg.dataset.family in DEFAULT_PERLIN_THRESHOLDS:
            cfg.noise.perlin_threshold = DEFAULT_PERLIN_THRESHOLDS[cfg.dataset.family]
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        default = getattr(cls(), key) if _has_default(known[key]) else None
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value or {}, f"{prefix}{key}.")
        elif isinstance(default, tuple) and value is not None:
            kwargs[key] = tuple(value)
        elif key == "resolution" and value is not None:
            kwargs[key] = tuple(int(v) for v in value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _has_default(f: dataclasses.Field) -> bool:
    return f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a YAML run config and apply ``key.sub=value`` overrides on top."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: parse error at {where}: {getattr(exc, 'problem', exc)}") from exc
    data = apply_overrides(data, overrides)
    return RunConfig.from_dict(data)


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: cannot parse value") from exc
        set_path(data, key.strip(), value)
    return data


def set_path(data: dict, key: str, value: Any) -> None:
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key!r}: {part!r} is not a section")
    node[parts[-1]] = value


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


ABLATION_PRESETS = {
    "no_upscale": {"backbone.upscale": False},
    "no_cls": {"head.cls_enabled": False},
    "no_cls_sn_anom": {"head.cls_enabled": False, "noise.generator_style": "simplenet_full_copy"},
    "old_train": {
        "train.scheduler_milestones": [],
        "head.stop_grad_to_seg": False,
        "loss.clip_grad_norm": 0.0,
        "loss.seg_focal": False,
    },
    "overlap": {"noise.overlap_allowed": True},
    "sn_anom": {"noise.generator_style": "simplenet_full_copy"},
    "no_anom": {"noise.synthetic_enabled": False},
}


def apply_preset(cfg: RunConfig, preset: str) -> RunConfig:
    """Return a copy of ``cfg`` with an ablation preset's toggles applied."""
    if preset not in ABLATION_PRESETS:
        raise ConfigError(f"unknown ablation preset {preset!r}; choose from {sorted(ABLATION_PRESETS)}")
    data = cfg.to_dict()
    for key, value in ABLATION_PRESETS[preset].items():
        set_path(data, key, copy.deepcopy(value))
    return RunConfig.from_dict(data)
