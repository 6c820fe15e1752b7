"""Pipeline configuration: one YAML file with per-command sections."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError
from .geotile import DEFAULT_GROUND_SIZE_M, DEFAULT_TARGET_PX, PATCH_SIZE
from .promptcraft import DEFAULT_BLUR_SIGMA_PX, DEFAULT_BRIGHTNESS_FACTOR

CONFIG_SCHEMA_VERSION = 1
OUTPUT_DIRS = ("tiles", "masks", "prompts", "checkpoints", "mosaics", "reports")


@dataclass
class PathsConfig:
    output_root: str = "runs/default"
    raster_dir: str | None = None
    records: str | None = None
    annotation_dir: str | None = None
    image_dir: str | None = None


@dataclass
class TilingConfig:
    ground_size_m: float = DEFAULT_GROUND_SIZE_M
    target_px: int = DEFAULT_TARGET_PX

    def validate(self):
        if self.ground_size_m <= 0:
            raise ConfigurationError("tiling.ground_size_m must be positive")
        if self.target_px < PATCH_SIZE or self.target_px % PATCH_SIZE:
            raise ConfigurationError(f"tiling.target_px must be a positive multiple of {PATCH_SIZE}")


@dataclass
class PromptcraftConfig:
    brightness_factor: float = DEFAULT_BRIGHTNESS_FACTOR
    blur_sigma_px: float = DEFAULT_BLUR_SIGMA_PX

    def validate(self):
        if not 0 < self.brightness_factor < 1:
            raise ConfigurationError("promptcraft.brightness_factor must lie in (0, 1)")
        if self.blur_sigma_px <= 0:
            raise ConfigurationError("promptcraft.blur_sigma_px must be positive")


@dataclass
class TrainingConfig:
    """All trainer settings except the seed and determinism switch, which live in ``runtime``."""

    batch_size: int = 64
    epochs: int = 2000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    weight_decay: float = 1e-2
    mixed_precision: bool = True
    level_weights: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    checkpoint_every: int = 100
    device: str = "cpu"


@dataclass
class ModelConfig:
    backend: str = "mock"
    backend_options: dict[str, Any] = field(default_factory=dict)
    decoder: dict[str, Any] = field(default_factory=dict)
    init: str = "random"  # "random", "published" or a checkpoint path
    checkpoint: str | None = None  # inference weights; defaults to the selected best


@dataclass
class EvaluationConfig:
    held_out_event: str = "Ida"
    val_fraction: float = 0.15

    def validate(self):
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError("evaluation.val_fraction must lie in (0, 1)")


@dataclass
class RuntimeConfig:
    seed: int = 0
    deterministic_mode: bool = False
    worker_count: int = 1

    def validate(self):
        if self.worker_count < 1:
            raise ConfigurationError("runtime.worker_count must be at least 1")


def _parse_scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "5e-4" (no dot) as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


_SECTIONS = {
    "paths": PathsConfig,
    "tiling": TilingConfig,
    "promptcraft": PromptcraftConfig,
    "training": TrainingConfig,
    "model": ModelConfig,
    "evaluation": EvaluationConfig,
    "runtime": RuntimeConfig,
}


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    promptcraft: PromptcraftConfig = field(default_factory=PromptcraftConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def validate(self) -> "PipelineConfig":
        for name in _SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                section.validate()
        return self

    def to_dict(self) -> dict:
        out = {"schema_version": CONFIG_SCHEMA_VERSION}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        d = dict(d or {})
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported config schema_version {version!r}")
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in _SECTIONS.items():
            values = d.get(name) or {}
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(values) - names
            if bad:
                raise ConfigurationError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = klass(**values)
        return cls(**kwargs, base_dir=Path(base_dir))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        return cls.from_dict(yaml.safe_load(path.read_text()), base_dir=path.parent)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path

    def apply_override(self, assignment: str) -> None:
        """Apply ``section.key=value``; the value is parsed as YAML."""
        if "=" not in assignment:
            raise ConfigurationError(f"override must look like section.key=value, got {assignment!r}")
        dotted, raw = assignment.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) < 2 or parts[0] not in _SECTIONS:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        target = getattr(self, parts[0])
        value = _parse_scalar(raw)
        if len(parts) == 2:
            if parts[1] not in {f.name for f in dataclasses.fields(target)}:
                raise ConfigurationError(f"unknown config key {dotted!r}")
            setattr(target, parts[1], value)
        else:
            container = getattr(target, parts[1])
            if not isinstance(container, dict):
                raise ConfigurationError(f"{'.'.join(parts[:2])} is not a mapping")
            for p in parts[2:-1]:
                container = container.setdefault(p, {})
            container[parts[-1]] = value

    def resolve(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def output_root(self) -> Path:
        return self.resolve(self.paths.output_root)

    def out(self, name: str) -> Path:
        if name not in OUTPUT_DIRS:
            raise KeyError(name)
        return self.output_root / name
