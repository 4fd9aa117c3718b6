"""Experiment configuration: nested dataclasses, YAML loading, dotted overrides, hashing.

Defaults tagged ``[published]`` in field comments are the settings reported
for the method; ``[desk]`` marks choices made for this small-scale build.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .assignment import DEFAULT_SCALE_RANGES, DEFAULT_STRIDES, PyramidSpec
from .synth import DomainShiftParams, GenParams


class ConfigError(ValueError):
    pass


PUBLISHED_DEFAULTS = frozenset({
    "model.channels", "model.head_convs", "model.disc_convs", "model.strides",
    "loss.alpha", "loss.alpha_warmup", "loss.beta", "loss.delta", "loss.grl_ga", "loss.grl_ca",
    "loss.align_levels", "train.lr", "train.momentum", "train.weight_decay",
})


@dataclass
class DataConfig:
    image_size: int = 128  # [desk] replaces the 800px shorter side
    class_names: list = field(default_factory=lambda: ["circle", "square", "triangle"])  # [desk]
    objects_per_image: list = field(default_factory=lambda: [1, 4])  # [desk]
    size_range: list = field(default_factory=lambda: [16, 100])  # [desk]
    max_overlap: float = 0.15  # [desk]
    distractors: list = field(default_factory=lambda: [2, 6])  # [desk]
    haze_strength: float = 0.55  # [desk] fog proxy
    blur_sigma: float = 1.5  # [desk]
    contrast_scale: float = 0.7  # [desk]
    luminance_shift: float = 0.05  # [desk]
    haze_color: float = 0.8  # [desk]
    n_source_train: int = 2000  # [desk]
    n_source_val: int = 500  # [desk]
    n_target_train: int = 2000  # [desk]
    n_target_val: int = 500  # [desk]
    seed: int = 0  # [desk] dataset seed, independent of the training seed
    root: Optional[str] = None  # read from disk when set, otherwise generate in memory

    def gen_params(self) -> GenParams:
        return GenParams(
            image_size=self.image_size,
            class_names=tuple(self.class_names),
            objects_per_image=tuple(self.objects_per_image),
            size_range=tuple(self.size_range),
            max_overlap=self.max_overlap,
            distractors=tuple(self.distractors),
            shift=DomainShiftParams(self.haze_strength, self.blur_sigma, self.contrast_scale,
                                    self.luminance_shift, self.haze_color),
        )

    def split_counts(self) -> dict[str, int]:
        return {"source-train": self.n_source_train, "source-val": self.n_source_val,
                "target-train": self.n_target_train, "target-val": self.n_target_val}


@dataclass
class ModelConfig:
    channels: int = 256  # [published] pyramid / head / discriminator width
    head_convs: int = 4  # [published] 3x3 convs per branch tower
    disc_convs: int = 4  # [published] same tower depth for both discriminators
    widths: list = field(default_factory=lambda: [32, 64, 128, 256])  # [desk] trunk stages
    stem: int = 16  # [desk]
    backbone_norm: str = "group"  # [desk] "group" or "none" for the trunk; head towers always use GroupNorm
    strides: list = field(default_factory=lambda: list(DEFAULT_STRIDES))  # [published] F3..F7
    scale_ranges: list = field(default_factory=lambda: [list(r) for r in DEFAULT_SCALE_RANGES])  # [desk]
    prior: float = 0.01  # [desk] initial foreground probability

    def pyramid(self) -> PyramidSpec:
        return PyramidSpec.from_lists(self.strides, self.scale_ranges)


@dataclass
class LossConfig:
    alpha: float = 0.01  # [published] global alignment weight, full phase
    alpha_warmup: float = 0.1  # [published] global alignment weight during warm-up
    beta: float = 0.1  # [published] center-aware alignment weight
    delta: float = 20.0  # [published] center-aware map scaling
    grl_ga: float = 0.01  # [published] reversed-gradient weight, global path
    grl_ca: float = 0.02  # [published] reversed-gradient weight, center-aware path
    focal_gamma: float = 2.0  # [desk]
    focal_alpha: float = 0.25  # [desk]
    centerness_weighted_iou: bool = False  # [desk]
    detach_center_map: bool = True  # [desk] center-aware map treated as a constant
    use_ga: bool = True
    use_ca: bool = True
    align_levels: list = field(default_factory=lambda: [3, 4, 5, 6, 7])  # [published] all five levels


@dataclass
class TrainConfig:
    lr: float = 5e-3  # [published]
    momentum: float = 0.9  # [published]
    weight_decay: float = 5e-4  # [published]
    batch_size: int = 4  # [desk] images per domain per step
    total_steps: int = 2000  # [desk]
    warmup_steps: Optional[int] = None  # [desk] None -> 20% of total_steps
    seed: int = 0
    grad_clip: Optional[float] = None  # [desk] max global grad norm, off by default
    dtype: str = "float64"  # [desk]
    threads: int = 1
    source_split: str = "source-train"  # "target-train" trains the labelled-target reference model
    eval_every: int = 0  # 0 -> evaluate only at the end
    checkpoint_every: int = 0  # 0 -> checkpoint only at init and end

    @property
    def warmup(self) -> int:
        return int(round(0.2 * self.total_steps)) if self.warmup_steps is None else self.warmup_steps


@dataclass
class EvalConfig:
    split: str = "target-val"
    score_thresh: float = 0.05  # [desk]
    nms_iou: float = 0.6  # [desk]
    topk: int = 100  # [desk] candidates per level
    max_dets: int = 100  # [desk] detections per image
    batch_size: int = 16


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        l, t = self.loss, self.train
        if l.alpha < 0 or l.beta < 0 or l.alpha_warmup < 0:
            raise ConfigError("loss.alpha, loss.alpha_warmup and loss.beta must be >= 0")
        if l.delta <= 0:
            raise ConfigError("loss.delta must be > 0")
        if l.grl_ga < 0 or l.grl_ca < 0:
            raise ConfigError("GRL weights must be >= 0")
        if not set(l.align_levels) <= {3, 4, 5, 6, 7}:
            raise ConfigError(f"loss.align_levels must be within 3..7, got {l.align_levels}")
        if t.total_steps < 0 or not 0 <= t.warmup <= t.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps ({t.warmup}) <= total_steps ({t.total_steps})")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if t.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype must be float32 or float64, got {t.dtype}")
        if t.source_split not in ("source-train", "target-train"):
            raise ConfigError(f"train.source_split must be source-train or target-train, got {t.source_split}")
        if self.model.backbone_norm not in ("group", "none"):
            raise ConfigError(f"model.backbone_norm must be 'group' or 'none', got {self.model.backbone_norm!r}")
        try:
            self.model.pyramid()
            self.data.gen_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self, section: str | None = None) -> str:
        d = self.to_dict() if section is None else self.to_dict()[section]
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def data_hash(self) -> str:
        """Hash of the fields that determine dataset contents (not where it lives)."""
        d = self.to_dict()["data"]
        d.pop("root")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _merge(obj, updates: dict, path: str):
    if not isinstance(updates, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    names = {f.name for f in fields(obj)}
    for key, value in updates.items():
        full = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key {full!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, full)
        else:
            setattr(obj, key, _coerce(value, current, full))


def _coerce(value, current, key):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(current, (list, tuple)) and isinstance(value, (list, tuple)):
        return list(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{key}: cannot use {value!r} where a {type(current).__name__} is expected")


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    return key.strip(), value


def _nest(key: str, value) -> dict:
    out: Any = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=(), base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Defaults < YAML file < ``key=value`` overrides (dotted paths)."""
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        _merge(cfg, doc, "")
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        if key.count(".") != 1:
            raise ConfigError(f"unknown config key {key!r}")
        _merge(cfg, _nest(key, value), "")
    return cfg.validate()


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _merge(cfg, d, "")
    return cfg.validate()


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
