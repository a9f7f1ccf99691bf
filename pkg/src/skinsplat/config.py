"""Run configuration: defaults, YAML round trip, dotted-key overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from .losses import LossWeights
from .refine import OutputBounds


@dataclass
class ScheduleConfig:
    """Training schedule: warmup, alternation blocks, density-control windows."""

    warmup_iters: int = 10_000
    alternation_block: int = 5_000
    total_iters: int = 100_000
    densify_until: int = 50_000
    densify_start: int = 500
    densify_interval: int = 100
    parent_update_every: int = 1_000
    densify_grad_threshold: float = 1.2e-5  # on pixel-space mean gradients
    opacity_prune_threshold: float = 0.005
    split_scale_threshold: float = 0.05
    prune_scale_threshold: float = 1.0

    def validate(self) -> None:
        if not (0 < self.warmup_iters <= self.total_iters):
            raise ValueError("warmup_iters must be in (0, total_iters]")
        if self.densify_until > self.total_iters:
            raise ValueError("densify_until must be <= total_iters")
        for name in ("alternation_block", "densify_interval", "parent_update_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RefinerConfig:
    hidden_width: int = 256
    bounds_mode: str = "bounded"
    max_translation: float = 0.10
    max_rotation_deg: float = 30.0
    translation_scale: float = 0.01
    rotation_scale: float = float(1.0 / np.pi)
    learning_rate: float = 1.0e-4

    def to_bounds(self) -> OutputBounds:
        return OutputBounds(
            mode=self.bounds_mode,
            max_translation=self.max_translation,
            max_rotation=np.deg2rad(self.max_rotation_deg),
            translation_scale=self.translation_scale,
            rotation_scale=self.rotation_scale,
        )


@dataclass
class OptimizerConfig:
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    rotation_lr: float = 1.0e-3
    scale_lr: float = 5.0e-3
    opacity_lr: float = 5.0e-2
    sh_lr: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8


@dataclass
class BackgroundConfig:
    count: int = 20_000
    radius: float | None = None  # None: auto-fit to 2x the camera rig radius


@dataclass
class DatasetConfig:
    frame_stride: int = 1
    heldout_every: int = 0  # k > 0 holds out frames with index % k == k // 2
    train_cameras: list[str] = field(default_factory=list)  # empty = all
    test_cameras: list[str] = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    sh_degree: int = 2
    tile_size: int = 16
    tau: float = 0.10
    init_opacity: float = 0.1
    init_scale: float | None = None  # None: mean canonical edge length
    background_color: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    mask_threshold: float = 10.0
    workers: int = 1
    checkpoint_every: int = 1_000
    losses: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def validate(self) -> None:
        self.schedule.validate()
        self.refiner.to_bounds()
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")
        if self.tile_size <= 0 or self.workers <= 0:
            raise ValueError("tile_size/workers must be positive")
        if not 0 < self.init_opacity < 1:
            raise ValueError("init_opacity must be in (0, 1)")
        if len(self.background_color) != 3:
            raise ValueError("background_color needs 3 components")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = _dataclass_from_dict(cls, data, path="")
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def to_yaml(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def apply_overrides(self, overrides: list[str]) -> None:
        """Apply `dotted.key=value` strings, type-checked against the fields."""
        for item in overrides:
            if "=" not in item:
                raise KeyError(f"override {item!r} is not of the form key=value")
            key, value = item.split("=", 1)
            _set_dotted(self, key.strip(), value.strip())
        self.validate()


def _dataclass_from_dict(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        where = path.rstrip(".") or "config"
        raise KeyError(f"unknown keys in {where}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise KeyError(f"{path}{name}: expected a mapping")
            kwargs[name] = _dataclass_from_dict(type(current), value, path=f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _set_dotted(cfg, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not is_dataclass(obj) or p not in {f.name for f in fields(obj)}:
            raise KeyError(f"unknown config key {dotted!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
        raise KeyError(f"unknown config key {dotted!r}")
    current = getattr(obj, leaf)
    setattr(obj, leaf, _coerce(raw, current, dotted))


def _coerce(raw: str, current, key: str):
    if raw.lower() in ("none", "null"):
        return None
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise KeyError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError as exc:
            raise KeyError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(current, float) or current is None:
        try:
            return float(raw)
        except ValueError as exc:
            raise KeyError(f"{key}: expected a number, got {raw!r}") from exc
    if isinstance(current, list):
        items = [s for s in raw.split(",") if s]
        if current and isinstance(current[0], float):
            return [float(s) for s in items]
        return items
    return raw
