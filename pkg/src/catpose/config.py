"""Pipeline configuration.

All sections are plain dataclasses that round-trip through JSON. Every stage
output records :func:`digest` of the sections it depends on so later stages can
refuse to mix artifacts produced under different settings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .geometry import CameraIntrinsics

QUALITY_TERMS = ("q1", "q2", "q3")


@dataclass
class CameraConfig:
    width: int = 640
    height: int = 480
    fx: float = 575.0
    fy: float = 575.0
    cx: float | None = None
    cy: float | None = None

    def intrinsics(self) -> CameraIntrinsics:
        cx = self.width / 2.0 if self.cx is None else self.cx
        cy = self.height / 2.0 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy, self.width, self.height)


@dataclass
class ViewConfig:
    count: int = 89
    test_count: int = 20
    radius_factor: float = 2.0
    hemisphere: bool = True
    min_elevation: float = 0.0
    # None: derive the test-view azimuth offset from the seed
    test_azimuth_offset: float | None = None

    def __post_init__(self):
        if self.count < 1 or self.test_count < 1:
            raise ConfigError("view counts must be >= 1")
        if not self.radius_factor > 0:
            raise ConfigError("radius_factor must be positive")


@dataclass
class PartConfig:
    patch_size: int = 32
    stride: int = 8
    min_foreground: float = 0.5

    def __post_init__(self):
        if self.patch_size < 2 or self.stride < 1:
            raise ConfigError("patch_size must be >= 2 and stride >= 1")
        if not 0.0 <= self.min_foreground <= 1.0:
            raise ConfigError("min_foreground must lie in [0, 1]")


@dataclass
class ForestConfig:
    n_trees: int = 8
    max_depth: int = 20
    min_samples: int = 20
    n_candidates: int = 200
    subset_fraction: float = 0.5
    leaf_votes: int = 50
    epsilon: float = 1e-6
    gain_floor: float = 1e-7
    offset_radius: float = 30.0
    background_depth: float = 10.0
    quality: tuple = QUALITY_TERMS
    weights: tuple = (1.0, 1.0, 1.0)
    split_sample_cap: int | None = 2048
    seed: int = 0

    def __post_init__(self):
        self.quality = tuple(sorted(set(str(q).lower() for q in self.quality)))
        self.weights = tuple(float(w) for w in self.weights)
        if not self.quality or "q1" not in self.quality:
            raise ConfigError("quality mask must contain q1")
        if any(q not in QUALITY_TERMS for q in self.quality):
            raise ConfigError(f"unknown quality term in {self.quality}")
        if len(self.weights) != 3:
            raise ConfigError("weights needs three entries (q1, q2, q3)")
        if self.n_trees < 1 or self.max_depth < 0 or self.min_samples < 1 or self.n_candidates < 1:
            raise ConfigError("forest sizes must be positive")
        if not 0 < self.subset_fraction <= 1:
            raise ConfigError("subset_fraction must lie in (0, 1]")
        if self.leaf_votes < 1 or not self.epsilon > 0 or not self.offset_radius > 0:
            raise ConfigError("leaf_votes, epsilon and offset_radius must be positive")
        if self.split_sample_cap is not None and self.split_sample_cap < 2:
            raise ConfigError("split_sample_cap must be >= 2 or null")

    def term_weights(self):
        return {q: w for q, w in zip(QUALITY_TERMS, self.weights) if q in self.quality}


@dataclass
class InferenceConfig:
    bin_size: tuple = (4.0, 4.0, 0.05)
    z_range: tuple = (0.3, 10.0)
    smoothing_sigma: float = 1.0
    nms_size: int = 3
    top_k: int = 5
    # half-width (rad) of the rotation-vote window; null or 0 averages every vote
    rotation_cluster: float | None = None

    def __post_init__(self):
        self.bin_size = tuple(float(b) for b in self.bin_size)
        self.z_range = tuple(float(z) for z in self.z_range)
        if len(self.bin_size) != 3 or min(self.bin_size) <= 0:
            raise ConfigError("bin_size needs three positive entries")
        if not 0 <= self.z_range[0] < self.z_range[1]:
            raise ConfigError("z_range must be increasing and non-negative")
        if self.top_k < 1 or self.nms_size < 1:
            raise ConfigError("top_k and nms_size must be >= 1")
        if self.rotation_cluster is not None and self.rotation_cluster < 0:
            raise ConfigError("rotation_cluster must be >= 0 or null")


@dataclass
class EvalConfig:
    z: float = 0.3
    sample_count: int = 4096
    sample_seed: int = 0

    def __post_init__(self):
        if not self.z > 0 or self.sample_count < 1:
            raise ConfigError("eval z and sample_count must be positive")


@dataclass
class GenerateConfig:
    category: str = "table"
    count: int = 6
    n_train: int = 4


@dataclass
class PipelineConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    parts: PartConfig = field(default_factory=PartConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    seed: int = 0

    _SECTIONS = {
        "camera": CameraConfig, "views": ViewConfig, "parts": PartConfig,
        "forest": ForestConfig, "inference": InferenceConfig, "eval": EvalConfig,
        "generate": GenerateConfig,
    }

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        kwargs = {}
        for name, typ in cls._SECTIONS.items():
            sect = d.pop(name, {}) or {}
            names = {f.name for f in dataclasses.fields(typ)}
            unknown = set(sect) - names
            if unknown:
                raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
            try:
                kwargs[name] = typ(**sect)
            except TypeError as exc:
                raise ConfigError(f"bad config section {name!r}: {exc}") from None
        if "seed" in d:
            kwargs["seed"] = int(d.pop("seed"))
        if d:
            raise ConfigError(f"unknown config keys: {sorted(d)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def digest(self, *sections) -> str:
        """Hash of the named sections (all of them when none are given)."""
        d = self.to_dict()
        keys = sections or tuple(sorted(d))
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def digest_of(*parts) -> str:
    blob = json.dumps(list(parts), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
