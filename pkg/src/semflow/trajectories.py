"""Dense point sampling, flow tracking and trajectory pruning.

Tracks are 15 flow steps long, i.e. 16 points on consecutive frames.
Sampling follows the improved-trajectories recipe: a regular grid, a
minimum-eigenvalue corner test relative to the strongest response in the
frame, and suppression of grid cells that already hold a live track.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage

from .denseflow import FlowField, median_filter_flow

log = logging.getLogger(__name__)

TRACK_STEPS = 15
TRACK_POINTS = TRACK_STEPS + 1


@dataclass(frozen=True)
class SamplerParams:
    stride: int = 5
    quality: float = 0.001
    max_step: float = 8.0
    min_std: float = 0.3
    motion_floor: float = 0.4
    erratic_frac: float = 0.7
    median_kernel: int = 3

    def __post_init__(self):
        if self.stride < 2:
            raise ValueError("stride must be >= 2")
        if not 0.0 < self.erratic_frac < 1.0:
            raise ValueError("erratic_frac must lie in (0, 1)")


@dataclass
class Trajectory:
    points: np.ndarray  # (16, 2) float64, columns x, y
    start_frame: int

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start_frame, self.start_frame + len(self.points))

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points, axis=0)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.start_frame == other.start_frame and np.array_equal(self.points, other.points)


def corner_response(frame: np.ndarray) -> np.ndarray:
    """Smaller eigenvalue of the 3x3-summed structure tensor of Sobel gradients."""
    img = np.asarray(frame, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    a = ndimage.uniform_filter(gx * gx, size=3, mode="nearest") * 9.0
    b = ndimage.uniform_filter(gx * gy, size=3, mode="nearest") * 9.0
    c = ndimage.uniform_filter(gy * gy, size=3, mode="nearest") * 9.0
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    # Clamp rounding noise; the matrix is positive semi-definite.
    return np.maximum(half_tr - disc, 0.0)


def grid_points(shape: tuple[int, int], stride: int) -> np.ndarray:
    h, w = shape
    off = stride // 2
    xs = np.arange(off, w, stride)
    ys = np.arange(off, h, stride)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)


def dense_sample(
    frame: np.ndarray,
    stride: int = 5,
    existing: np.ndarray | None = None,
    quality: float = 0.001,
) -> np.ndarray:
    """Grid seeds with a corner response above ``quality`` times the frame maximum.

    A seed is dropped when its grid cell already contains a point from
    ``existing``. Returns an (n, 2) array of x, y positions.
    """
    if stride < 2:
        raise ValueError("stride must be >= 2")
    resp = corner_response(frame)
    h, w = resp.shape
    thresh = quality * resp.max(initial=0.0)
    grid = grid_points((h, w), stride)
    gxi = grid[:, 0].astype(int)
    gyi = grid[:, 1].astype(int)
    keep = resp[gyi, gxi] > thresh
    if existing is not None and len(existing):
        existing = np.asarray(existing, dtype=np.float64)
        ncols = w // stride + 1
        nrows = h // stride + 1
        occupied = np.zeros((nrows, ncols), dtype=bool)
        cx = np.clip(np.floor(existing[:, 0] / stride).astype(int), 0, ncols - 1)
        cy = np.clip(np.floor(existing[:, 1] / stride).astype(int), 0, nrows - 1)
        occupied[cy, cx] = True
        keep &= ~occupied[gyi // stride, gxi // stride]
    return grid[keep]


def bilinear(field: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample ``field`` (h, w) at float (x, y) points; neighbours clamp at borders."""
    h, w = field.shape
    x = pts[:, 0]
    y = pts[:, 1]
    x0 = np.clip(np.floor(x).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
    bot = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _advect(pts: np.ndarray, flow: FlowField) -> np.ndarray:
    return pts + np.stack([bilinear(flow.u, pts), bilinear(flow.v, pts)], axis=1)


def _valid_step(old: np.ndarray, new: np.ndarray, shape: tuple[int, int], max_step: float) -> np.ndarray:
    h, w = shape
    step = np.hypot(*(new - old).T)
    inside = (new[:, 0] >= 0) & (new[:, 0] < w) & (new[:, 1] >= 0) & (new[:, 1] < h)
    return inside & (step <= max_step) & np.all(np.isfinite(new), axis=1)


def track(
    flows: Sequence[FlowField],
    seed,
    start: int,
    params: SamplerParams | None = None,
    prefiltered: bool = False,
) -> Trajectory | None:
    """Advect ``seed`` through the next 15 flow fields; ``None`` if rejected.

    Unless ``prefiltered`` is set, each field is median filtered first.
    """
    params = params or SamplerParams()
    if len(flows) < TRACK_STEPS:
        raise ValueError(f"tracking needs {TRACK_STEPS} flow fields, got {len(flows)}")
    pt = np.asarray(seed, dtype=np.float64).reshape(1, 2)
    pts = [pt[0].copy()]
    for flow in flows[:TRACK_STEPS]:
        if not prefiltered:
            flow = median_filter_flow(flow, params.median_kernel)
        nxt = _advect(pt, flow)
        if not _valid_step(pt, nxt, flow.shape, params.max_step)[0]:
            return None
        pt = nxt
        pts.append(pt[0].copy())
    return Trajectory(np.array(pts), start)


def extract_trajectories(
    frames: Sequence[np.ndarray],
    flows: Sequence[FlowField],
    params: SamplerParams | None = None,
) -> list[Trajectory]:
    """Online dense tracking over a whole clip.

    New seeds are drawn on every frame that still leaves room for a full
    track. Results come back sorted by (start frame, y, x) of the seed.
    """
    params = params or SamplerParams()
    n = len(frames)
    if len(flows) != n - 1:
        raise ValueError(f"{n} frames need {n - 1} flow fields, got {len(flows)}")
    filtered = [median_filter_flow(f, params.median_kernel) for f in flows]
    shape = frames[0].shape

    done: list[Trajectory] = []
    # Live tracks: (start frame, list of (n,2) position arrays) held in parallel arrays.
    hist = np.zeros((0, TRACK_POINTS, 2))
    starts = np.zeros(0, dtype=int)
    lengths = np.zeros(0, dtype=int)
    for t in range(n):
        if t + TRACK_STEPS <= n - 1:
            current = hist[np.arange(len(hist)), lengths - 1] if len(hist) else None
            seeds = dense_sample(frames[t], params.stride, current, params.quality)
            if len(seeds):
                block = np.zeros((len(seeds), TRACK_POINTS, 2))
                block[:, 0] = seeds
                hist = np.concatenate([hist, block])
                starts = np.concatenate([starts, np.full(len(seeds), t)])
                lengths = np.concatenate([lengths, np.ones(len(seeds), dtype=int)])
        if t == n - 1 or not len(hist):
            continue
        idx = np.arange(len(hist))
        cur = hist[idx, lengths - 1]
        nxt = _advect(cur, filtered[t])
        ok = _valid_step(cur, nxt, shape, params.max_step)
        hist[idx, lengths] = nxt
        lengths = lengths + 1
        finished = ok & (lengths == TRACK_POINTS)
        for i in np.flatnonzero(finished):
            done.append(Trajectory(hist[i].copy(), int(starts[i])))
        live = ok & ~finished
        hist, starts, lengths = hist[live], starts[live], lengths[live]

    done.sort(key=lambda tr: (tr.start_frame, tr.points[0, 1], tr.points[0, 0]))
    return done


def is_static(traj: Trajectory, params: SamplerParams) -> bool:
    mags = np.hypot(*traj.steps.T)
    return bool(mags.std() < params.min_std and mags.mean() < params.motion_floor)


def is_erratic(traj: Trajectory, params: SamplerParams) -> bool:
    mags = np.hypot(*traj.steps.T)
    total = mags.sum()
    return bool(total > 0 and mags.max() > params.erratic_frac * total)


def prune(trajs: Sequence[Trajectory], params: SamplerParams | None = None) -> list[Trajectory]:
    """Drop static tracks (unless they clear the motion floor) and tracks dominated by one jump."""
    params = params or SamplerParams()
    return [t for t in trajs if not is_static(t, params) and not is_erratic(t, params)]


@dataclass
class Compensation:
    flow: FlowField
    homography: np.ndarray | None
    inliers: int

    @property
    def degenerate(self) -> bool:
        return self.homography is None


MIN_INLIERS = 20


def homography_field(H: np.ndarray, shape: tuple[int, int]) -> FlowField:
    """Displacement H(p) - p at every pixel."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    den = H[2, 0] * xs + H[2, 1] * ys + H[2, 2]
    hx = (H[0, 0] * xs + H[0, 1] * ys + H[0, 2]) / den
    hy = (H[1, 0] * xs + H[1, 1] * ys + H[1, 2]) / den
    return FlowField(hx - xs, hy - ys)


def compensate_camera(
    flow: FlowField,
    prev: np.ndarray | None = None,
    nxt: np.ndarray | None = None,
    exclude: np.ndarray | None = None,
    stride: int = 4,
    reproj_threshold: float = 0.5,
) -> Compensation:
    """Remove the dominant planar motion from ``flow``.

    A homography is fit to grid correspondences p -> p + flow(p) with RANSAC;
    pixels flagged in ``exclude`` (e.g. foreground masks) are left out of the
    fit. Fewer than 20 inliers leaves the flow untouched.
    """
    for img, name in ((prev, "prev"), (nxt, "next")):
        if img is not None and np.shape(img) != flow.shape:
            raise ValueError(f"{name} frame shape {np.shape(img)} does not match flow {flow.shape}")
    src = grid_points(flow.shape, stride)
    if exclude is not None:
        ex = np.asarray(exclude, dtype=bool)
        src = src[~ex[src[:, 1].astype(int), src[:, 0].astype(int)]]
    if len(src) < MIN_INLIERS:
        log.warning("camera compensation skipped: %d correspondences", len(src))
        return Compensation(flow, None, 0)
    xi = src[:, 0].astype(int)
    yi = src[:, 1].astype(int)
    dst = src + np.stack([flow.u[yi, xi], flow.v[yi, xi]], axis=1)
    H, inl = cv2.findHomography(
        src.astype(np.float32), dst.astype(np.float32), cv2.RANSAC, reproj_threshold, maxIters=2000, confidence=0.995
    )
    n_in = int(inl.sum()) if inl is not None else 0
    if H is None or n_in < MIN_INLIERS or not np.all(np.isfinite(H)):
        log.warning("camera compensation skipped: %d inliers", n_in)
        return Compensation(flow, None, n_in)
    cam = homography_field(H, flow.shape)
    return Compensation(FlowField(flow.u - cam.u, flow.v - cam.v), H, n_in)
