"""Per-clip descriptor extraction into an on-disk store.

Store layout under ``out``::

    <clip_id>.sfd    descriptor blocks (SFD1 records), one per (channel, layer)
    <clip_id>.key    content hash of the clip files and extraction settings
    index.json       per-clip status and channel sizes
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..clipio import ClipRecord, load_clip, load_masks
from ..denseflow import clip_flows
from ..featuremaps import builtin_layer_maps, load_external_maps
from ..idtdesc import HOF_DIM, MBH_DIM, idt_descriptors
from ..semanticflow import ChannelPartition, partition
from ..tddpool import extract_clip_descriptors, read_descriptors, write_descriptors
from ..trajectories import compensate_camera, extract_trajectories, prune
from .config import PipelineConfig

log = logging.getLogger(__name__)

IDT_LAYERS = ("idt_mbh", "idt_hof", "idt_hog")
MAX_FAILURE_RATE = 0.10


class PartialFailure(RuntimeError):
    """Some work units failed; results on disk are incomplete."""


@dataclass
class ClipResult:
    clip_id: str
    sets: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    sizes: dict[str, int] = field(default_factory=dict)
    error: str | None = None
    dump: str | None = None


def external_map_dir(root: str | os.PathLike, clip_id: str, layer: str, scale_index: int) -> Path:
    return Path(root) / clip_id / layer / f"s{scale_index}"


def clip_descriptors(
    frames: Sequence[np.ndarray],
    masks: Sequence[np.ndarray] | None,
    cfg: PipelineConfig,
    clip_id: str = "",
) -> tuple[dict[tuple[str, str], np.ndarray], ChannelPartition]:
    flows = clip_flows(frames, cfg.flow)
    trajs = prune(extract_trajectories(frames, flows, cfg.sampler), cfg.sampler)
    motion = flows
    if cfg.compensate:
        motion = []
        for i, f in enumerate(flows):
            exclude = masks[i] > 0 if masks is not None else None
            motion.append(compensate_camera(f, frames[i], frames[i + 1], exclude=exclude).flow)
    part = partition(trajs, masks, cfg.channels, cfg.policy_threshold)

    if cfg.provider == "builtin":
        maps = {layer: builtin_layer_maps(layer, frames, motion, cfg.scales) for layer in cfg.layers}
    else:
        shape = frames[0].shape
        maps = {
            layer: [
                load_external_maps(external_map_dir(cfg.external_root, clip_id, layer, i), layer, r, len(frames), shape)
                for i, r in enumerate(cfg.scales)
            ]
            for layer in cfg.layers
        }
    sets = extract_clip_descriptors(part, maps, cfg.layers, cfg.norm)
    if cfg.use_idt:
        # One pass over all trajectories so the per-frame tables are built once per clip.
        tags = list(part.channels)
        allt = [t for tag in tags for t in part.channels[tag]]
        blocks = np.split(idt_descriptors(allt, frames, motion), np.cumsum([len(part.channels[t]) for t in tags])[:-1])
        for tag, d in zip(tags, blocks):
            sets[(tag, "idt_mbh")] = d[:, :MBH_DIM]
            sets[(tag, "idt_hof")] = d[:, MBH_DIM:MBH_DIM + HOF_DIM]
            sets[(tag, "idt_hog")] = d[:, MBH_DIM + HOF_DIM:]
    return sets, part


def _needs_masks(cfg: PipelineConfig) -> bool:
    return cfg.channels != "off"


def _process(record: ClipRecord, cfg: PipelineConfig, dump: bool = False) -> ClipResult:
    try:
        frames = load_clip(record)
        masks = None
        if record.mask_dir is not None:
            masks = load_masks(record, len(frames), frames[0].shape)
        elif _needs_masks(cfg):
            raise ValueError(f"channel mode {cfg.channels!r} needs masks but {record.clip_id} has none")
        sets, part = clip_descriptors(frames, masks, cfg, record.clip_id)
        text = format_trajectory_dump(record.clip_id, part) if dump else None
        return ClipResult(record.clip_id, sets, part.sizes(), dump=text)
    except Exception as exc:  # per-clip failures are reported, not fatal
        log.warning("extraction failed for %s: %s", record.clip_id, exc)
        return ClipResult(record.clip_id, error=f"{type(exc).__name__}: {exc}")


def clip_hash(record: ClipRecord, cfg: PipelineConfig) -> str:
    h = hashlib.sha256(cfg.extraction_key().encode())
    for d in (record.frame_dir, record.mask_dir):
        if d is None:
            continue
        for p in sorted(Path(d).iterdir()):
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class ExtractSummary:
    done: list[str]
    cached: list[str]
    failed: dict[str, str]
    empty: list[str]


def run_extract(
    records: Sequence[ClipRecord],
    cfg: PipelineConfig,
    out: str | os.PathLike,
    dump_dir: str | os.PathLike | None = None,
) -> ExtractSummary:
    """Extract every clip into ``out``; clips with an up-to-date key file are skipped.

    With ``dump_dir`` set, every clip is recomputed and its trajectories are
    written there as ``<clip_id>.traj``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.clip_id)
    keys = {}
    todo = []
    cached = []
    for r in records:
        try:
            keys[r.clip_id] = clip_hash(r, cfg)
        except OSError as exc:
            keys[r.clip_id] = None
            log.warning("cannot hash %s: %s", r.clip_id, exc)
        key_file = out / f"{r.clip_id}.key"
        if dump_dir is None and keys[r.clip_id] and key_file.exists() and (out / f"{r.clip_id}.sfd").exists() \
                and key_file.read_text() == keys[r.clip_id]:
            cached.append(r.clip_id)
        else:
            todo.append(r)

    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_process, todo, [cfg] * len(todo), [dump_dir is not None] * len(todo)))
    else:
        results = [_process(r, cfg, dump_dir is not None) for r in todo]
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        for res in results:
            if res.dump is not None:
                with open(Path(dump_dir) / f"{res.clip_id}.traj", "w", encoding="utf-8", newline="\n") as fh:
                    fh.write(res.dump)

    index_path = out / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    done, failed, empty = [], {}, []
    for res in results:
        if res.error is not None:
            failed[res.clip_id] = res.error
            index[res.clip_id] = {"status": "failed", "error": res.error}
            for suffix in (".sfd", ".key"):
                (out / f"{res.clip_id}{suffix}").unlink(missing_ok=True)
            continue
        path = out / f"{res.clip_id}.sfd"
        if sum(res.sizes.values()) == 0:
            log.warning("%s: no trajectories survived; writing an empty descriptor file", res.clip_id)
            path.write_bytes(b"")
            empty.append(res.clip_id)
        else:
            write_descriptors(path, res.sets)
        (out / f"{res.clip_id}.key").write_text(keys[res.clip_id] or "")
        index[res.clip_id] = {"status": "ok", "channels": dict(sorted(res.sizes.items()))}
        done.append(res.clip_id)
    index_path.write_text(json.dumps(dict(sorted(index.items())), indent=1, sort_keys=True) + "\n")

    summary = ExtractSummary(done, cached, failed, empty)
    if records and len(failed) > MAX_FAILURE_RATE * len(records):
        raise PartialFailure(f"{len(failed)} of {len(records)} clips failed extraction: {sorted(failed)[:5]}")
    return summary


def load_store(out: str | os.PathLike, clip_id: str) -> dict[tuple[str, str], np.ndarray]:
    path = Path(out) / f"{clip_id}.sfd"
    if not path.exists():
        raise FileNotFoundError(f"no descriptors for {clip_id} in {out}; run extract first")
    return read_descriptors(path)


def format_trajectory_dump(clip_id: str, part: ChannelPartition) -> str:
    """One line per trajectory: clip_id, start_frame, 16 x/y pairs and the channel tag."""
    rows = []
    for tag, trajs in part.channels.items():
        for t in trajs:
            coords = " ".join(f"{x:.4f} {y:.4f}" for x, y in t.points)
            rows.append((t.start_frame, t.points[0, 1], t.points[0, 0], f"{clip_id} {t.start_frame} {coords} {tag}"))
    rows.sort()
    return "".join(line + "\n" for *_, line in rows)
