"""Class taxonomies shared across the pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class SemanticClass(enum.IntEnum):
    """Mask codes. Zero is background; the rest are the foreground categories."""

    BACKGROUND = 0
    BICYCLE = 1
    PEDESTRIAN = 2
    VEHICLE = 3

    @property
    def short(self) -> str:
        return _SHORT[self]


_SHORT = {
    SemanticClass.BACKGROUND: "bg",
    SemanticClass.BICYCLE: "bic",
    SemanticClass.PEDESTRIAN: "ped",
    SemanticClass.VEHICLE: "veh",
}

FOREGROUND_CLASSES = (SemanticClass.BICYCLE, SemanticClass.PEDESTRIAN, SemanticClass.VEHICLE)


class IncidentClass(str, enum.Enum):
    """Per-clip label. Declaration order is the canonical class order."""

    HIGH_BICYCLE = "high_bicycle"
    HIGH_PEDESTRIAN = "high_pedestrian"
    HIGH_VEHICLE = "high_vehicle"
    LOW_BICYCLE = "low_bicycle"
    LOW_PEDESTRIAN = "low_pedestrian"
    LOW_VEHICLE = "low_vehicle"
    BACKGROUND = "background"

    @classmethod
    def from_parts(cls, risk: str, agent: SemanticClass | None) -> "IncidentClass":
        if risk == "background" or agent is None:
            return cls.BACKGROUND
        if risk not in ("high", "low"):
            raise ValueError(f"no incident class for risk level {risk!r}")
        return cls(f"{risk}_{agent.name.lower()}")

    @property
    def agent(self) -> SemanticClass | None:
        if self is IncidentClass.BACKGROUND:
            return None
        return SemanticClass[self.value.split("_", 1)[1].upper()]

    @property
    def risk(self) -> str:
        if self is IncidentClass.BACKGROUND:
            return "background"
        return self.value.split("_", 1)[0]


ALL_CLASSES: tuple[IncidentClass, ...] = tuple(IncidentClass)


@dataclass(frozen=True)
class TaskSpec:
    task: str
    classes: tuple[IncidentClass, ...]

    def index(self, label: IncidentClass) -> int:
        return self.classes.index(label)


RECOGNITION = TaskSpec("recognition", ALL_CLASSES[:6])
DETECTION = TaskSpec("detection", ALL_CLASSES)


def task_spec(name: str) -> TaskSpec:
    if name == "recognition":
        return RECOGNITION
    if name == "detection":
        return DETECTION
    raise ValueError(f"unknown task {name!r}; expected 'recognition' or 'detection'")
