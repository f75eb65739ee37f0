"""Run configuration for extraction, encoding and classification."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import yaml

from ..denseflow import FlowParams
from ..featuremaps import DEFAULT_SCALES, LAYERS, validate_scales
from ..tddpool import NORM_MODES
from ..trajectories import SamplerParams

CHANNEL_MODES = ("combined", "separated", "off")
CODEBOOK_SOURCES = ("all", "background", "generic")


@dataclass(frozen=True)
class PipelineConfig:
    provider: str = "builtin"
    external_root: str | None = None
    scales: tuple[float, ...] = DEFAULT_SCALES
    channels: str = "combined"
    layers: tuple[str, ...] = LAYERS
    norm: str = "both"
    use_idt: bool = False
    camera_compensation: bool | None = None  # None: on for builtin maps, off for external
    policy_threshold: float = 0.5
    task: str = "detection"
    codebook_source: str = "all"
    pca_dim: int = 64
    n_clusters: int = 256
    codebook_samples: int = 10000
    kmeans_max_iter: int = 100
    C: float = 1.0
    seed: int = 0
    classifier_seed: int | None = None
    workers: int = 1
    flow: FlowParams = field(default_factory=FlowParams)
    sampler: SamplerParams = field(default_factory=SamplerParams)

    def __post_init__(self):
        if self.provider not in ("builtin", "external"):
            raise ValueError(f"provider must be 'builtin' or 'external', got {self.provider!r}")
        if self.provider == "external" and not self.external_root:
            raise ValueError("external provider needs external_root")
        if self.channels not in CHANNEL_MODES:
            raise ValueError(f"channels must be one of {CHANNEL_MODES}, got {self.channels!r}")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")
        if self.codebook_source not in CODEBOOK_SOURCES:
            raise ValueError(f"codebook_source must be one of {CODEBOOK_SOURCES}")
        if self.task not in ("recognition", "detection"):
            raise ValueError(f"task must be 'recognition' or 'detection', got {self.task!r}")
        bad = [l for l in self.layers if l not in LAYERS]
        if bad or not self.layers:
            raise ValueError(f"layers must be a nonempty subset of {LAYERS}, got {self.layers}")
        object.__setattr__(self, "scales", validate_scales(self.scales))
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def compensate(self) -> bool:
        if self.camera_compensation is None:
            return self.provider == "builtin"
        return self.camera_compensation

    @property
    def svm_seed(self) -> int:
        return self.seed if self.classifier_seed is None else self.classifier_seed

    def with_(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["layers"] = list(self.layers)
        return d

    def extraction_key(self) -> str:
        """Hash of the settings that change extracted descriptors."""
        d = self.to_dict()
        sub = {k: d[k] for k in ("provider", "external_root", "scales", "channels", "layers", "norm",
                                 "use_idt", "policy_threshold", "flow", "sampler")}
        sub["compensate"] = self.compensate
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()


def config_from_dict(d: dict[str, Any]) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
    d = dict(d)
    if "flow" in d and isinstance(d["flow"], dict):
        d["flow"] = FlowParams(**d["flow"])
    if "sampler" in d and isinstance(d["sampler"], dict):
        d["sampler"] = SamplerParams(**d["sampler"])
    for key in ("scales", "layers"):
        if key in d:
            d[key] = tuple(d[key])
    return PipelineConfig(**d)


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
