"""Frame and mask loading, and the line-delimited JSON clip manifest."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import cv2
import numpy as np

from .labels import IncidentClass

MIN_FRAMES = 16
MIN_SIZE = 32

_FRAME_RE = re.compile(r"^frame_(\d{6})\.(png|pgm)$")
_MASK_RE = re.compile(r"^mask_(\d{6})\.(png|pgm)$")

# BT.601 luma, applied to RGB order.
_LUMA = np.array([0.299, 0.587, 0.114])


class ClipError(ValueError):
    """A clip on disk violates the frame/mask contract."""


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    frame_dir: Path
    label: IncidentClass
    split: str
    mask_dir: Path | None = None
    ttc: float | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ManifestError(f"{self.clip_id}: split must be 'train' or 'test', got {self.split!r}")


def _list(directory: Path, pattern: re.Pattern) -> list[Path]:
    if not directory.is_dir():
        raise ClipError(f"missing directory: {directory}")
    return sorted(p for p in directory.iterdir() if pattern.match(p.name))


def _decode(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ClipError(f"cannot decode image: {path}")
    if img.dtype != np.uint8:
        raise ClipError(f"expected 8-bit image, got {img.dtype}: {path}")
    return img


def read_frame(path: str | os.PathLike) -> np.ndarray:
    """Decode one frame to a float64 grayscale array in [0, 1]."""
    path = Path(path)
    img = _decode(path)
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[:, :, :3]
        # OpenCV decodes to BGR.
        gray = img[:, :, ::-1].astype(np.float64) @ _LUMA
    else:
        gray = img.astype(np.float64)
    return gray / 255.0


def read_mask(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    img = _decode(path)
    if img.ndim != 2:
        raise ClipError(f"mask must be single-channel: {path}")
    if img.max(initial=0) > 3:
        raise ClipError(f"mask code out of range {{0,1,2,3}} (max {int(img.max())}): {path}")
    return img.astype(np.uint8)


def load_clip(record: ClipRecord) -> list[np.ndarray]:
    files = _list(Path(record.frame_dir), _FRAME_RE)
    if not files:
        raise ClipError(f"no frame_%06d.png|pgm files in {record.frame_dir}")
    frames = []
    for path in files:
        frame = read_frame(path)
        if frames and frame.shape != frames[0].shape:
            raise ClipError(
                f"dimension mismatch: {path} is {frame.shape[1]}x{frame.shape[0]}, "
                f"expected {frames[0].shape[1]}x{frames[0].shape[0]}"
            )
        frames.append(frame)
    h, w = frames[0].shape
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ClipError(f"frames are {w}x{h}, minimum is {MIN_SIZE}x{MIN_SIZE}: {record.frame_dir}")
    return frames


def load_masks(record: ClipRecord, n_frames: int | None = None, shape: tuple[int, int] | None = None) -> list[np.ndarray]:
    """Load masks for ``record``; ``n_frames``/``shape`` check alignment with the frames."""
    if record.mask_dir is None:
        raise ClipError(f"{record.clip_id}: record has no mask_dir")
    files = _list(Path(record.mask_dir), _MASK_RE)
    if n_frames is None:
        n_frames = len(_list(Path(record.frame_dir), _FRAME_RE))
    if len(files) != n_frames:
        raise ClipError(f"mask count {len(files)} does not match frame count {n_frames}: {record.mask_dir}")
    masks = [read_mask(p) for p in files]
    ref = shape if shape is not None else (masks[0].shape if masks else None)
    for path, m in zip(files, masks):
        if m.shape != ref:
            raise ClipError(f"mask dimension mismatch at {path}: {m.shape} vs {ref}")
    return masks


def write_frames(frames: Iterable[np.ndarray], directory: str | os.PathLike, ext: str = "png") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        img = np.clip(np.rint(np.asarray(f) * 255.0), 0, 255).astype(np.uint8)
        if not cv2.imwrite(str(directory / f"frame_{i:06d}.{ext}"), img):
            raise OSError(f"failed to write frame {i} into {directory}")


def write_masks(masks: Iterable[np.ndarray], directory: str | os.PathLike, ext: str = "png") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        m = np.asarray(m)
        if m.max(initial=0) > 3:
            raise ClipError(f"mask {i} has code {int(m.max())} outside {{0,1,2,3}}")
        if not cv2.imwrite(str(directory / f"mask_{i:06d}.{ext}"), m.astype(np.uint8)):
            raise OSError(f"failed to write mask {i} into {directory}")


# -- manifest ---------------------------------------------------------------

_FIELDS = ("clip_id", "frame_dir", "mask_dir", "label", "split", "ttc")


def _rel(path: Path | None, base: Path) -> str | None:
    if path is None:
        return None
    path = Path(path)
    try:
        return Path(os.path.relpath(path, base)).as_posix() if path.is_absolute() else path.as_posix()
    except ValueError:  # different drive on Windows
        return str(path)


def write_manifest(records: Iterable[ClipRecord], path: str | os.PathLike) -> None:
    """Write one JSON object per line. Absolute paths are stored relative to the manifest."""
    path = Path(path)
    base = path.resolve().parent
    seen: set[str] = set()
    lines = []
    for r in records:
        if r.clip_id in seen:
            raise ManifestError(f"duplicate clip_id {r.clip_id!r}")
        seen.add(r.clip_id)
        obj = {
            "clip_id": r.clip_id,
            "frame_dir": _rel(r.frame_dir, base),
            "mask_dir": _rel(r.mask_dir, base),
            "label": r.label.value,
            "split": r.split,
            "ttc": r.ttc,
        }
        lines.append(json.dumps(obj, ensure_ascii=False))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _resolve(base: Path, value: str) -> Path:
    return Path(os.path.normpath(base / value))


def read_manifest(path: str | os.PathLike) -> list[ClipRecord]:
    """Parse a manifest; relative directories resolve against the manifest's folder."""
    path = Path(path)
    base = path.resolve().parent
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                missing = [k for k in _FIELDS if k not in obj]
                if missing:
                    raise ManifestError(f"missing fields {missing}")
                ttc = obj["ttc"]
                rec = ClipRecord(
                    clip_id=str(obj["clip_id"]),
                    frame_dir=_resolve(base, obj["frame_dir"]),
                    mask_dir=None if obj["mask_dir"] is None else _resolve(base, obj["mask_dir"]),
                    label=IncidentClass(obj["label"]),
                    split=obj["split"],
                    ttc=None if ttc is None else float(ttc),
                )
            except (json.JSONDecodeError, ManifestError, ValueError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if rec.clip_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id {rec.clip_id!r}")
            seen.add(rec.clip_id)
            records.append(rec)
    return records


def split_counts(records: Iterable[ClipRecord], split: str) -> dict[IncidentClass, int]:
    counts = {c: 0 for c in IncidentClass}
    for r in records:
        if r.split == split:
            counts[r.label] += 1
    return counts
