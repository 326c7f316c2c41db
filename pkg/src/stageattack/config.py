"""Run configuration: one flat record shared by all CLI commands.

A run persists its fully resolved config next to its artifacts; loading
that echo back reproduces the run. Unknown keys are rejected rather than
ignored, so typos fail instead of silently running defaults. The echoed
``output_root`` is always ``"."``: an artifact tree describes itself
relative to its own location, which keeps two runs of the same config
into different directories bitwise identical.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .attack import AttackConfig
from .attention import DEFAULT_EXTRACTOR_ID, DEFAULT_GRID

MODES = ("saga", "random", "coldspot")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "saga"
    seed: int = 0
    epsilon: float = 16 / 255
    step_size: float = 1 / 255
    total_iterations: int = 300
    num_stages: int = 10
    hotspots_per_stage: int = 3
    iou_threshold: float = 0.3
    crop_scale: tuple[float, float] = (0.5, 1.0)
    update_rule: str = "sign"
    extractors: tuple[str, ...] = (DEFAULT_EXTRACTOR_ID,)
    grid: tuple[int, int] = DEFAULT_GRID
    resolution: tuple[int, int] | None = None
    workers: int = 1
    manifest: str | None = None
    output_root: str = "."
    study_images: int = 10
    study_texts: int = 5
    study_crops_per_pair: int = 20
    study_epochs: int = 5
    study_area_range: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.extractors:
            raise ValueError("at least one extractor id is required")
        object.__setattr__(self, "extractors", tuple(self.extractors))
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))
        object.__setattr__(self, "study_area_range", tuple(self.study_area_range))
        if self.resolution is not None:
            object.__setattr__(self, "resolution", tuple(self.resolution))
        self.to_attack_config()  # validates the attack-facing fields

    def to_attack_config(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon,
            step_size=self.step_size,
            total_iterations=self.total_iterations,
            num_stages=self.num_stages,
            hotspots_per_stage=self.hotspots_per_stage,
            iou_threshold=self.iou_threshold,
            crop_scale=self.crop_scale,
            update_rule=self.update_rule,
            seed=self.seed,
        )

    def echo(self) -> dict:
        body = dataclasses.asdict(self)
        body["output_root"] = "."
        return body

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, mapping: dict, **overrides) -> "RunConfig":
        unknown = set(mapping) - cls.field_names() - {"schema"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged = {k: v for k, v in mapping.items() if k != "schema"}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**merged)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        body = json.loads(Path(path).read_text())
        if not isinstance(body, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        return cls.from_mapping(body, **overrides)
