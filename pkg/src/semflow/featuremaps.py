"""Multi-scale feature maps sampled by trajectory pooling.

Two providers share one container type:

* built-in banks: oriented-gradient energy for the spatial layers and
  sign-split flow for the temporal layers, cheap enough to run anywhere;
* external tensors dumped by a network, one ``SFM1`` file per frame (or
  per flow step for temporal layers).

Map size at scale ``r`` is ``ceil(r * frame_size * stride_factor)``.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .binio import FormatError, parse_int, read_header, read_payload, write_record
from .denseflow import FlowField

LAYERS = ("spa4", "spa5", "tem3", "tem4")
LAYER_STREAM = {"spa4": "spatial", "spa5": "spatial", "tem3": "temporal", "tem4": "temporal"}
EXTERNAL_CHANNELS = {"spa4": 512, "spa5": 512, "tem3": 256, "tem4": 512}
BUILTIN_BINS = {"spa4": 8, "spa5": 16}
BUILTIN_TEMPORAL_STRIDE = {"tem3": 1, "tem4": 2}
BUILTIN_CHANNELS = {"spa4": 8, "spa5": 16, "tem3": 4, "tem4": 4}

DEFAULT_SCALES = (1.0, 1.0 / math.sqrt(2.0), 0.5)

_MAP_RE = re.compile(r"^map_(\d{6})\.sfm$")


def validate_scales(scales: Sequence[float]) -> tuple[float, ...]:
    scales = tuple(float(s) for s in scales)
    if not scales or scales[0] != 1.0:
        raise ValueError(f"scales must start with 1.0, got {scales}")
    if any(not 0.0 < s <= 1.0 for s in scales):
        raise ValueError(f"scales must lie in (0, 1], got {scales}")
    if any(a <= b for a, b in zip(scales, scales[1:])):
        raise ValueError(f"scales must be strictly descending, got {scales}")
    return scales


def map_size(frame_size: int, scale: float, stride_factor: float = 1.0) -> int:
    # The epsilon keeps exact products such as 0.5 * 64 from rounding up.
    return max(1, math.ceil(scale * frame_size * stride_factor - 1e-9))


@dataclass
class FeatureMap:
    layer: str
    scale: float
    data: np.ndarray  # (frames, channels, height, width)
    stride_factor: float = 1.0

    def __post_init__(self):
        if self.layer not in LAYER_STREAM:
            raise ValueError(f"unknown layer {self.layer!r}")
        if self.data.ndim != 4:
            raise ValueError(f"map data must be 4-D (frames, channels, h, w), got {self.data.shape}")

    @property
    def stream(self) -> str:
        return LAYER_STREAM[self.layer]

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def map_height(self) -> int:
        return self.data.shape[2]

    @property
    def map_width(self) -> int:
        return self.data.shape[3]


def _resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    if img.shape == (height, width):
        return img
    return cv2.resize(img, (width, height), interpolation=cv2.INTER_AREA)


def central_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """[-1, 0, 1] / 2 derivatives with replicated borders."""
    p = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def orientation_channels(gx: np.ndarray, gy: np.ndarray, bins: int, weight: np.ndarray | None = None) -> np.ndarray:
    """Soft-assign each pixel's weight (default: gradient magnitude) to the two nearest of
    ``bins`` orientation centres spread over 360 degrees, centre 0 at angle 0."""
    mag = np.hypot(gx, gy) if weight is None else weight
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    pos = ang * (bins / (2 * np.pi))
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(int) % bins
    hi = (lo + 1) % bins
    w_lo = mag * (1.0 - frac)
    w_hi = mag * frac
    npix = gx.size
    idx = np.arange(npix).reshape(gx.shape)
    size = bins * npix
    out = np.bincount((lo * npix + idx).ravel(), w_lo.ravel(), size) \
        + np.bincount((hi * npix + idx).ravel(), w_hi.ravel(), size)
    return out.reshape((bins,) + gx.shape)


def builtin_spatial_maps(frames: Sequence[np.ndarray], scales: Sequence[float] = DEFAULT_SCALES, bins: int = 8, layer: str = "spa4") -> list[FeatureMap]:
    if bins < 4:
        raise ValueError("bins must be >= 4")
    scales = validate_scales(scales)
    h, w = frames[0].shape
    out = []
    for r in scales:
        mw, mh = map_size(w, r), map_size(h, r)
        data = np.empty((len(frames), bins, mh, mw))
        for i, f in enumerate(frames):
            small = _resize(np.asarray(f, dtype=np.float64), mw, mh)
            data[i] = orientation_channels(*central_gradient(small), bins)
        out.append(FeatureMap(layer, r, data))
    return out


def sign_split(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([np.maximum(u, 0), np.maximum(-u, 0), np.maximum(v, 0), np.maximum(-v, 0)])


def _strided_flows(flows: Sequence[FlowField], stride: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if stride == 1:
        return [(f.u, f.v) for f in flows]
    # Displacement over ``stride`` steps, replicating the final field past the end.
    out = []
    n = len(flows)
    for t in range(n):
        us = [flows[min(t + k, n - 1)].u for k in range(stride)]
        vs = [flows[min(t + k, n - 1)].v for k in range(stride)]
        out.append((np.sum(us, axis=0), np.sum(vs, axis=0)))
    return out


def builtin_temporal_maps(flows: Sequence[FlowField], scales: Sequence[float] = DEFAULT_SCALES, layer: str = "tem3", temporal_stride: int = 1) -> list[FeatureMap]:
    """Channels u+, u-, v+, v- per flow step, spatially resampled to each scale.

    Values stay in full-resolution px/frame; only the grid is resampled.
    """
    scales = validate_scales(scales)
    h, w = flows[0].shape
    fields = _strided_flows(flows, temporal_stride)
    out = []
    for r in scales:
        mw, mh = map_size(w, r), map_size(h, r)
        data = np.empty((len(fields), 4, mh, mw))
        for i, (u, v) in enumerate(fields):
            data[i] = sign_split(_resize(u, mw, mh), _resize(v, mw, mh))
        out.append(FeatureMap(layer, r, data))
    return out


def builtin_layer_maps(layer: str, frames: Sequence[np.ndarray], flows: Sequence[FlowField], scales: Sequence[float] = DEFAULT_SCALES) -> list[FeatureMap]:
    if layer in BUILTIN_BINS:
        return builtin_spatial_maps(frames, scales, BUILTIN_BINS[layer], layer)
    if layer in BUILTIN_TEMPORAL_STRIDE:
        return builtin_temporal_maps(flows, scales, layer, BUILTIN_TEMPORAL_STRIDE[layer])
    raise ValueError(f"unknown layer {layer!r}")


# -- external tensors -------------------------------------------------------

def write_map_file(path: str | os.PathLike, layer: str, data: np.ndarray, stride_factor: float = 1.0) -> None:
    """Write a (frames, channels, h, w) block as one ``SFM1`` record."""
    data = np.asarray(data)
    f, c, h, w = data.shape
    with open(path, "wb") as fh:
        write_record(fh, "SFM1", [layer, w, h, c, f, repr(float(stride_factor))], data.ravel())


def read_map_file(path: str | os.PathLike) -> tuple[str, float, np.ndarray]:
    with open(path, "rb") as fh:
        head = read_header(fh, "SFM1", 6)
        if head is None:
            raise FormatError(f"empty map file: {path}")
        layer = head[0]
        w, h, c, f = (parse_int(x, n) for x, n in zip(head[1:5], ("width", "height", "channels", "frames")))
        try:
            sf = float(head[5])
        except ValueError as exc:
            raise FormatError(f"bad stride_factor {head[5]!r} in {path}") from exc
        data = read_payload(fh, f * c * h * w).reshape(f, c, h, w)
        if fh.read(1):
            raise FormatError(f"trailing bytes after map payload: {path}")
    return layer, sf, data


def write_external_maps(fmap: FeatureMap, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(fmap.frames):
        write_map_file(directory / f"map_{i:06d}.sfm", fmap.layer, fmap.data[i:i + 1], fmap.stride_factor)


def load_external_maps(
    directory: str | os.PathLike,
    layer: str,
    scale: float,
    n_frames: int | None = None,
    frame_shape: tuple[int, int] | None = None,
) -> FeatureMap:
    """Load ``map_%06d.sfm`` files for one layer and scale.

    ``n_frames`` is the clip length: spatial layers need one map per frame,
    temporal layers one per flow step (``n_frames - 1``) or per frame.
    ``frame_shape`` (h, w) enables the map-size check.
    """
    if layer not in EXTERNAL_CHANNELS:
        raise ValueError(f"unknown layer {layer!r}")
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"missing map directory: {directory}")
    files = sorted(p for p in directory.iterdir() if _MAP_RE.match(p.name))
    if not files:
        raise FormatError(f"no map_%06d.sfm files in {directory}")
    indices = [int(_MAP_RE.match(p.name).group(1)) for p in files]
    if indices != list(range(len(files))):
        missing = sorted(set(range(max(indices) + 1)) - set(indices))
        raise FormatError(f"missing map frames {missing[:5]} in {directory}")
    blocks = []
    stride_factor = None
    for p in files:
        got_layer, sf, data = read_map_file(p)
        if got_layer != layer:
            raise FormatError(f"{p}: header layer {got_layer!r}, expected {layer!r}")
        if data.shape[1] != EXTERNAL_CHANNELS[layer]:
            raise FormatError(f"{p}: {layer} must have {EXTERNAL_CHANNELS[layer]} channels, header says {data.shape[1]}")
        if blocks and data.shape[2:] != blocks[0].shape[2:]:
            raise FormatError(f"{p}: map size {data.shape[2:]} differs from {blocks[0].shape[2:]}")
        if stride_factor is not None and sf != stride_factor:
            raise FormatError(f"{p}: stride_factor {sf} differs from {stride_factor}")
        stride_factor = sf
        blocks.append(data)
    data = np.concatenate(blocks)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"non-finite values in maps under {directory}")
    if n_frames is not None:
        allowed = {n_frames} if LAYER_STREAM[layer] == "spatial" else {n_frames - 1, n_frames}
        if data.shape[0] not in allowed:
            raise FormatError(f"{directory}: {data.shape[0]} map frames for a {n_frames}-frame clip ({layer})")
    if frame_shape is not None:
        h, w = frame_shape
        want = (map_size(h, scale, stride_factor), map_size(w, scale, stride_factor))
        if data.shape[2:] != want:
            raise FormatError(f"{directory}: map size {data.shape[2:]} but scale {scale} expects {want}")
    return FeatureMap(layer, float(scale), data, stride_factor)
