"""Trajectory-pooled descriptors: sum map values along each trajectory.

For a trajectory with points (x_p, y_p, z_p) and a map at scale r with
network stride factor s, the descriptor is

    sum_p  map[z_p, :, round(r*s*y_p), round(r*s*x_p)]

with half-up rounding and clamping to the map. Temporal maps hold one
fewer frame than the clip (one per flow step); the final trajectory point
reuses the last step.
"""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import numpy as np

from .binio import FormatError, parse_int, read_header, read_payload, write_record
from .featuremaps import FeatureMap
from .semanticflow import ChannelPartition
from .trajectories import Trajectory

NORM_MODES = ("none", "spatiotemporal_channel_max", "per_descriptor_l2", "both")


class CoverageError(ValueError):
    pass


def _frame_index(z: np.ndarray, fmap: FeatureMap) -> np.ndarray:
    limit = fmap.frames if fmap.stream == "spatial" else fmap.frames + 1
    if z.min(initial=0) < 0 or z.max(initial=0) >= limit:
        raise CoverageError(
            f"trajectory frames {z.min()}..{z.max()} not covered by {fmap.frames} {fmap.layer} map frames"
        )
    return np.minimum(z, fmap.frames - 1)


def _cells(points: np.ndarray, fmap: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    k = fmap.scale * fmap.stride_factor
    xi = np.clip(np.floor(k * points[..., 0] + 0.5).astype(int), 0, fmap.map_width - 1)
    yi = np.clip(np.floor(k * points[..., 1] + 0.5).astype(int), 0, fmap.map_height - 1)
    return xi, yi


def pool_trajectory(traj: Trajectory, fmap: FeatureMap) -> np.ndarray:
    return pool_many([traj], fmap)[0]


def pool_many(trajs: Sequence[Trajectory], fmap: FeatureMap) -> np.ndarray:
    """(n_trajectories, channels) pooled sums."""
    if not trajs:
        return np.zeros((0, fmap.channels))
    pts = np.stack([t.points for t in trajs])  # (n, P, 2)
    z = np.stack([t.frames for t in trajs])
    zi = _frame_index(z, fmap)
    xi, yi = _cells(pts, fmap)
    # Advanced indices around a slice put the channel axis last: (n, P, C).
    vals = fmap.data[zi, :, yi, xi]
    return vals.sum(axis=1, dtype=np.float64)


def normalize_maps(fmap: FeatureMap, mode: str = "both") -> FeatureMap:
    """Divide each channel by its maximum over all frames and positions of the clip."""
    if mode not in NORM_MODES:
        raise ValueError(f"unknown normalization {mode!r}")
    if mode not in ("spatiotemporal_channel_max", "both"):
        return fmap
    peak = np.abs(fmap.data).max(axis=(0, 2, 3), keepdims=True)
    scale = np.where(peak > 0, peak, 1.0)
    return FeatureMap(fmap.layer, fmap.scale, fmap.data / scale, fmap.stride_factor)


def l2_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def extract_clip_descriptors(
    part: ChannelPartition,
    maps: Mapping[str, Sequence[FeatureMap]],
    layers: Sequence[str],
    norm: str = "both",
) -> dict[tuple[str, str], np.ndarray]:
    """Descriptors keyed by (channel tag, layer).

    Each value stacks one row per (scale, trajectory), scale-major.
    """
    if norm not in NORM_MODES:
        raise ValueError(f"unknown normalization {norm!r}")
    missing = [l for l in layers if l not in maps]
    if missing:
        raise KeyError(f"feature maps missing for layers {missing}")
    out: dict[tuple[str, str], np.ndarray] = {}
    for layer in layers:
        normed = [normalize_maps(m, norm) for m in maps[layer]]
        for tag, trajs in part.channels.items():
            blocks = [pool_many(trajs, m) for m in normed]
            desc = np.concatenate(blocks) if blocks else np.zeros((0, 0))
            if norm in ("per_descriptor_l2", "both"):
                desc = l2_rows(desc)
            out[(tag, layer)] = desc
    return out


# -- descriptor store -------------------------------------------------------

def write_descriptors(path: str | os.PathLike, sets: Mapping[tuple[str, str], np.ndarray]) -> None:
    """One ``SFD1|layer|dim|count|channel_tag`` record per set, in sorted key order."""
    with open(path, "wb") as fh:
        for tag, layer in sorted(sets):
            arr = np.asarray(sets[(tag, layer)])
            write_record(fh, "SFD1", [layer, arr.shape[1], arr.shape[0], tag], arr.ravel())


def read_descriptors(path: str | os.PathLike) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        while True:
            head = read_header(fh, "SFD1", 4)
            if head is None:
                break
            layer, dim, count, tag = head[0], parse_int(head[1], "dim"), parse_int(head[2], "count"), head[3]
            if (tag, layer) in out:
                raise FormatError(f"{path}: duplicate block ({tag}, {layer})")
            out[(tag, layer)] = read_payload(fh, dim * count).reshape(count, dim).astype(np.float64)
    return out
