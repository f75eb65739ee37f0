"""Split trajectories into foreground/background channels using semantic masks.

Each trajectory point looks up the mask code under it (nearest pixel,
clamped). When at least ``threshold`` of the points land on a foreground
code, the trajectory is foreground: in ``combined`` mode it goes to the
single ``fg`` channel, in ``separated`` mode to the channel of its most
frequent class (ties go to bicycle, then pedestrian, then vehicle).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .labels import FOREGROUND_CLASSES, SemanticClass
from .trajectories import Trajectory

BG = "bg"
FG = "fg"
ALL = "all"
CLASS_TAGS = {c: f"fg_{c.short}" for c in FOREGROUND_CLASSES}

MODE_TAGS = {
    "combined": (BG, FG),
    "separated": (BG, *CLASS_TAGS.values()),
    "off": (ALL,),
}


class MaskAlignmentError(ValueError):
    pass


def nearest_index(coord: np.ndarray, size: int) -> np.ndarray:
    """Round half up and clamp into [0, size)."""
    return np.clip(np.floor(np.asarray(coord) + 0.5).astype(int), 0, size - 1)


def point_codes(traj: Trajectory, masks: Sequence[np.ndarray]) -> np.ndarray:
    z = traj.frames
    if z[0] < 0 or z[-1] >= len(masks):
        raise MaskAlignmentError(
            f"trajectory spans frames {z[0]}..{z[-1]} but only {len(masks)} masks are available"
        )
    h, w = masks[z[0]].shape
    xi = nearest_index(traj.points[:, 0], w)
    yi = nearest_index(traj.points[:, 1], h)
    codes = np.empty(len(z), dtype=np.int64)
    for i, (frame, x, y) in enumerate(zip(z, xi, yi)):
        m = masks[frame]
        if m.shape != (h, w):
            raise MaskAlignmentError(f"mask {frame} has shape {m.shape}, expected {(h, w)}")
        codes[i] = m[y, x]
    return codes


def assign_channel(traj: Trajectory, masks: Sequence[np.ndarray], mode: str = "combined", threshold: float = 0.5) -> str:
    if mode not in ("combined", "separated"):
        raise ValueError(f"unknown channel mode {mode!r}")
    codes = point_codes(traj, masks)
    fg = codes[codes > 0]
    if len(fg) / len(codes) < threshold or len(fg) == 0:
        return BG
    if mode == "combined":
        return FG
    counts = np.bincount(fg, minlength=4)[1:]
    return CLASS_TAGS[SemanticClass(int(np.argmax(counts)) + 1)]


@dataclass
class ChannelPartition:
    mode: str
    channels: dict[str, list[Trajectory]]

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.channels.items()}

    def __len__(self) -> int:
        return sum(len(v) for v in self.channels.values())


def partition(
    trajs: Sequence[Trajectory],
    masks: Sequence[np.ndarray] | None,
    mode: str = "combined",
    threshold: float = 0.5,
) -> ChannelPartition:
    """Disjoint, exhaustive split of ``trajs``; ``off`` mode puts everything in one channel."""
    if mode not in MODE_TAGS:
        raise ValueError(f"unknown channel mode {mode!r}")
    channels: dict[str, list[Trajectory]] = {tag: [] for tag in MODE_TAGS[mode]}
    for traj in trajs:
        if mode == "off":
            tag = ALL
        else:
            if masks is None:
                raise MaskAlignmentError("channel filtering needs semantic masks")
            tag = assign_channel(traj, masks, mode, threshold)
        channels[tag].append(traj)
    return ChannelPartition(mode, channels)
