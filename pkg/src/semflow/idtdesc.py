"""HoG / HoF / MBH descriptors aligned with trajectories.

The volume around a trajectory is 32x32 px per point over its first 15
points, split into 2x2 spatial cells and 3 temporal cells of 5 frames.
Per-frame orientation histograms are turned into integral images so every
cell sum is four lookups; parts of a patch outside the frame contribute
nothing (zero padding).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .denseflow import FlowField
from .featuremaps import central_gradient, orientation_channels
from .trajectories import TRACK_STEPS, Trajectory

PATCH = 32
NXY = 2
NT = 3
HOG_BINS = 8
HOF_BINS = 9
ZERO_FLOW = 1e-2

HOG_DIM = NXY * NXY * NT * HOG_BINS  # 96
HOF_DIM = NXY * NXY * NT * HOF_BINS  # 108
MBH_DIM = 2 * HOG_DIM  # 192
IDT_DIM = MBH_DIM + HOF_DIM + HOG_DIM  # 396


def hof_channels(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit mass per pixel: orientation bins 0..7 (soft), bin 8 for |flow| <= 1e-2 px."""
    moving = np.hypot(u, v) > ZERO_FLOW
    out = np.empty((HOF_BINS,) + u.shape)
    out[:8] = orientation_channels(u, v, 8, weight=moving.astype(np.float64))
    out[8] = ~moving
    return out


def _cell_sums(tables: np.ndarray, trajs: Sequence[Trajectory], normalize: bool) -> np.ndarray:
    """Sum each trajectory's 12 cells from per-frame integral tables.

    ``tables`` is (frames, bins, h+1, w+1); point p of a trajectory reads
    frame ``start + p``. Output is (n, NT*NXY*NXY*bins) ordered
    (temporal cell, row, column, bin).
    """
    n = len(trajs)
    bins = tables.shape[1]
    h, w = tables.shape[2] - 1, tables.shape[3] - 1
    out = np.zeros((n, NT, NXY, NXY, bins))
    if n == 0:
        return out.reshape(0, -1)
    pts = np.stack([t.points[:TRACK_STEPS] for t in trajs])
    starts = np.array([t.start_frame for t in trajs])
    cx = np.floor(pts[..., 0] + 0.5).astype(int)
    cy = np.floor(pts[..., 1] + 0.5).astype(int)
    half = PATCH // 2
    cell = PATCH // NXY
    per_t = TRACK_STEPS // NT
    for p in range(TRACK_STEPS):
        z = starts + p
        tc = p // per_t
        for gy in range(NXY):
            y0 = np.clip(cy[:, p] - half + gy * cell, 0, h)
            y1 = np.clip(cy[:, p] - half + (gy + 1) * cell, 0, h)
            for gx in range(NXY):
                x0 = np.clip(cx[:, p] - half + gx * cell, 0, w)
                x1 = np.clip(cx[:, p] - half + (gx + 1) * cell, 0, w)
                s = (tables[z, :, y1, x1] - tables[z, :, y0, x1]
                     - tables[z, :, y1, x0] + tables[z, :, y0, x0])
                out[:, tc, gy, gx] += s
    if normalize:
        norms = np.linalg.norm(out, axis=-1, keepdims=True)
        live = norms > 1e-12
        out = np.where(live, out / np.where(live, norms, 1.0), 0.0)
    return out.reshape(n, -1)


def _tables(planes: Sequence[np.ndarray]) -> np.ndarray:
    hist = np.stack(planes)
    out = np.zeros(hist.shape[:2] + (hist.shape[2] + 1, hist.shape[3] + 1))
    out[:, :, 1:, 1:] = hist.cumsum(axis=2).cumsum(axis=3)
    return out


def hog_tables(frames: Sequence[np.ndarray]) -> np.ndarray:
    return _tables([orientation_channels(*central_gradient(f), HOG_BINS) for f in frames])


def hof_tables(flows: Sequence[FlowField]) -> np.ndarray:
    return _tables([hof_channels(f.u, f.v) for f in flows])


def mbh_tables(flows: Sequence[FlowField]) -> tuple[np.ndarray, np.ndarray]:
    tx = _tables([orientation_channels(*central_gradient(f.u), HOG_BINS) for f in flows])
    ty = _tables([orientation_channels(*central_gradient(f.v), HOG_BINS) for f in flows])
    return tx, ty


def hog_descriptor(traj: Trajectory, frames: Sequence[np.ndarray], normalize: bool = True) -> np.ndarray:
    return _cell_sums(hog_tables(frames), [traj], normalize)[0]


def hof_descriptor(traj: Trajectory, flows: Sequence[FlowField], normalize: bool = True) -> np.ndarray:
    return _cell_sums(hof_tables(flows), [traj], normalize)[0]


def mbh_descriptor(traj: Trajectory, flows: Sequence[FlowField], normalize: bool = True) -> np.ndarray:
    tx, ty = mbh_tables(flows)
    return np.concatenate([_cell_sums(tx, [traj], normalize)[0], _cell_sums(ty, [traj], normalize)[0]])


def idt_descriptors(trajs: Sequence[Trajectory], frames: Sequence[np.ndarray], flows: Sequence[FlowField]) -> np.ndarray:
    """(n, 396) rows laid out as [MBH | HoF | HoG]."""
    if not trajs:
        return np.zeros((0, IDT_DIM))
    tx, ty = mbh_tables(flows)
    parts = [
        _cell_sums(tx, trajs, True),
        _cell_sums(ty, trajs, True),
        _cell_sums(hof_tables(flows), trajs, True),
        _cell_sums(hog_tables(frames), trajs, True),
    ]
    return np.concatenate(parts, axis=1)
