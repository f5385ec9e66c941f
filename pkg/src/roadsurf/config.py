"""Pipeline configuration: YAML file sections overridden by command-line flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .bev import COVERAGE_THRESHOLD, DEFAULT_RESOLUTION
from .enhancement import DEFAULT_ENHANCE_CLASSES
from .losses import LossWeights
from .occlusion import DEFAULT_DILATION, DEFAULT_NON_GROUND_CLASSES, DEFAULT_OCCLUDER_CLASSES
from .optimizer import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass
class EnhanceConfig:
    enabled: bool = True
    classes: tuple = DEFAULT_ENHANCE_CLASSES


@dataclass
class OcclusionSettings:
    use_inpainted: bool = True
    occluder_classes: tuple = DEFAULT_OCCLUDER_CLASSES
    non_ground_classes: tuple = DEFAULT_NON_GROUND_CLASSES
    dilation_radius: int = DEFAULT_DILATION


@dataclass
class BEVSettings:
    resolution: float = DEFAULT_RESOLUTION
    x: Optional[tuple] = None  # [min, max] meters; None covers the surfel bounding box
    y: Optional[tuple] = None
    coverage_threshold: float = COVERAGE_THRESHOLD


@dataclass
class PipelineConfig:
    dataset: str = "data"
    out: str = "out"
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    occlusion: OcclusionSettings = field(default_factory=OcclusionSettings)
    bev: BEVSettings = field(default_factory=BEVSettings)

    def validate(self, class_names: Optional[list[str]] = None) -> None:
        if not self.dataset or not self.out:
            raise ConfigError("dataset and out paths must be nonempty")
        if not self.bev.resolution > 0:
            raise ConfigError("bev.resolution must be positive")
        if self.optim.iterations < 0:
            raise ConfigError("optim.iterations must be nonnegative")
        if class_names is not None:
            for section, names in (("enhance.classes", self.enhance.classes),
                                   ("occlusion.occluder_classes", self.occlusion.occluder_classes),
                                   ("occlusion.non_ground_classes", self.occlusion.non_ground_classes)):
                for name in names:
                    if name not in class_names:
                        raise ConfigError(f"{section}: class {name!r} not in classes.json")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"optim": OptimConfig, "loss": LossWeights, "enhance": EnhanceConfig,
             "occlusion": OcclusionSettings, "bev": BEVSettings}


def _build(cls, values: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"{where}: unknown key {k!r}")
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict, where: str = "config") -> PipelineConfig:
    raw = dict(raw or {})
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, None) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"{where}: section {name!r} must be a mapping")
        kwargs[name] = _build(cls, section, f"{where}: {name}")
    for k in ("dataset", "out", "seed"):
        if k in raw:
            kwargs[k] = raw.pop(k)
    if raw:
        raise ConfigError(f"{where}: unknown key {sorted(raw)[0]!r}")
    cfg = PipelineConfig(**kwargs)
    cfg.optim.seed = cfg.seed
    return cfg


def load_config(path: Optional[Path]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw or {}, str(path))


def with_overrides(cfg: PipelineConfig, **flags) -> PipelineConfig:
    """Apply command-line values; ``None`` means the flag was not given."""
    cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim), loss=dataclasses.replace(cfg.loss),
                              enhance=dataclasses.replace(cfg.enhance),
                              occlusion=dataclasses.replace(cfg.occlusion), bev=dataclasses.replace(cfg.bev))
    if flags.get("seed") is not None:
        cfg.seed = int(flags["seed"])
    cfg.optim.seed = cfg.seed
    if flags.get("iterations") is not None:
        cfg.optim.iterations = int(flags["iterations"])
    if flags.get("no_enhance"):
        cfg.enhance.enabled = False
    if flags.get("no_inpaint"):
        cfg.occlusion.use_inpainted = False
    if flags.get("no_semantic_loss"):
        cfg.loss.lambda_s = 0.0
    if flags.get("bev_resolution") is not None:
        cfg.bev.resolution = float(flags["bev_resolution"])
    if flags.get("out") is not None:
        cfg.out = str(flags["out"])
    if flags.get("dataset") is not None:
        cfg.dataset = str(flags["dataset"])
    cfg.validate()
    return cfg
