"""Dense optical flow by Farnebäck polynomial expansion, plus median smoothing."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .binio import FormatError, parse_int, read_header, read_payload, write_record


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window_size: int = 15
    poly_n: int = 7
    poly_sigma: float = 1.5
    iterations: int = 3

    def __post_init__(self):
        if self.window_size % 2 == 0 or self.poly_n % 2 == 0:
            raise ValueError("window_size and poly_n must be odd")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must lie in (0, 1)")
        if self.iterations < 1 or self.pyramid_levels < 1:
            raise ValueError("iterations and pyramid_levels must be >= 1")


@dataclass
class FlowField:
    """Per-pixel displacement from one frame to the next, in px/frame."""

    u: np.ndarray
    v: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def stacked(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)

    @classmethod
    def constant(cls, shape: tuple[int, int], u: float, v: float) -> "FlowField":
        return cls(np.full(shape, float(u)), np.full(shape, float(v)))


def farneback_flow(prev: np.ndarray, nxt: np.ndarray, params: FlowParams | None = None) -> FlowField:
    """Dense flow taking ``prev`` onto ``nxt``; both are [0, 1] grayscale images."""
    params = params or FlowParams()
    prev = np.asarray(prev)
    nxt = np.asarray(nxt)
    if prev.shape != nxt.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    # OpenCV's expansion thresholds are tuned for the 0..255 range.
    a = (prev * 255.0).astype(np.float32)
    b = (nxt * 255.0).astype(np.float32)
    flow = cv2.calcOpticalFlowFarneback(
        a, b, None,
        params.pyramid_scale, params.pyramid_levels, params.window_size,
        params.iterations, params.poly_n, params.poly_sigma, 0,
    )
    u = flow[..., 0].astype(np.float64)
    v = flow[..., 1].astype(np.float64)
    h, w = prev.shape
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise FlowError("Farnebäck produced non-finite displacements")
    bound = max(h, w)
    if np.abs(u).max(initial=0) > bound or np.abs(v).max(initial=0) > bound:
        raise FlowError("Farnebäck displacement exceeds the frame size")
    return FlowField(u, v)


def median_filter_flow(flow: FlowField, kernel: int = 3) -> FlowField:
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 3, got {kernel}")
    return FlowField(
        ndimage.median_filter(flow.u, size=kernel, mode="nearest"),
        ndimage.median_filter(flow.v, size=kernel, mode="nearest"),
    )


def clip_flows(frames: list[np.ndarray], params: FlowParams | None = None) -> list[FlowField]:
    return [farneback_flow(a, b, params) for a, b in zip(frames[:-1], frames[1:])]


def save_flow(flow: FlowField, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        write_record(fh, "SFW1", [flow.width, flow.height, 2], np.concatenate([flow.u.ravel(), flow.v.ravel()]))


def load_flow(path: str | os.PathLike) -> FlowField:
    with open(Path(path), "rb") as fh:
        head = read_header(fh, "SFW1", 3)
        if head is None:
            raise FormatError(f"empty flow file: {path}")
        w, h, planes = (parse_int(x, n) for x, n in zip(head, ("width", "height", "planes")))
        if planes != 2:
            raise FormatError(f"flow dump must have 2 planes, got {planes}")
        data = read_payload(fh, 2 * w * h).astype(np.float64)
    return FlowField(data[: w * h].reshape(h, w), data[w * h:].reshape(h, w))
