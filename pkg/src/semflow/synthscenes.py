"""Deterministic synthetic near-miss clips with pixel-exact masks.

A clip is a smoothly textured background translated by a global ego
motion, a few unlabeled distractor patches drifting across it, and (for
incident clips) one agent drawn on top. The agent's apparent size grows
exponentially at a rate set by its time-to-collision, which is the
constant-TTC looming model: d(log size)/dt = gain / TTC. High-risk
agents also cross the view faster, so risk shows up in motion statistics
while class shows up in the agent's shape and stripe orientation.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import NOMINAL_FPS
from .clipio import ClipRecord, write_frames, write_manifest, write_masks
from .labels import IncidentClass, SemanticClass

log = logging.getLogger(__name__)

HIGH_RISK_TTC = 0.5
LOW_RISK_TTC = 2.0
LOOM_GAIN = 0.2
# Recording-trigger constants of the source dataset, kept as clip metadata only.
TRIGGER_G = 0.5
TRIGGER_SECONDS = 15.0

CLASS_ASPECT = {
    SemanticClass.BICYCLE: 0.8,
    SemanticClass.PEDESTRIAN: 0.45,
    SemanticClass.VEHICLE: 1.6,
}


class ExcludedScenario(ValueError):
    """The scenario's TTC falls in the excluded intermediate-risk band."""


def ttc_label(ttc: float | None) -> str:
    """Risk level for a time-to-collision in seconds; ``None`` means no agent."""
    if ttc is None:
        return "background"
    if not math.isfinite(ttc) or ttc <= 0:
        raise ValueError(f"time-to-collision must be positive, got {ttc}")
    if ttc < HIGH_RISK_TTC:
        return "high"
    if ttc > LOW_RISK_TTC:
        return "low"
    return "excluded"


@dataclass(frozen=True)
class ScenarioSpec:
    agent_class: SemanticClass | None = None
    agent_size: float = 16.0  # height in px at the middle frame
    agent_speed: float = 1.0  # lateral px/frame
    agent_heading: float = 0.0  # radians
    agent_aspect: float | None = None  # width / height; class default when None
    agent_center: tuple[float, float] | None = None  # (x, y) at the middle frame
    ego_flow: tuple[float, float] = (0.0, 0.0)
    closing_distance: float = 20.0  # m
    closing_speed: float = 10.0  # m/s
    n_frames: int = 20
    resolution: int = 64
    texture_seed: int = 0
    n_distractors: int = 2
    distractor_speed: float = 1.5
    distractor_size: float = 12.0
    loom_gain: float = LOOM_GAIN
    noise: float = 0.01

    def __post_init__(self):
        if self.n_frames < 16:
            raise ValueError("a clip needs at least 16 frames")
        if self.resolution < 32:
            raise ValueError("resolution must be at least 32 px")
        if self.agent_class is not None and self.closing_speed <= 0:
            raise ValueError("incident scenarios need a positive closing speed")

    @property
    def ttc(self) -> float | None:
        if self.agent_class is None:
            return None
        return self.closing_distance / self.closing_speed


@dataclass
class GeneratedClip:
    frames: list[np.ndarray]
    masks: list[np.ndarray]
    label: IncidentClass
    ttc: float | None
    footprints: list[np.ndarray] = field(repr=False)
    meta: dict[str, Any] = field(default_factory=dict)


class SmoothTexture:
    """Sum of random plane waves; evaluates anywhere in continuous coordinates."""

    def __init__(self, rng: np.random.Generator, n_waves: int = 10, freq=(0.04, 0.2), contrast: float = 0.35):
        self.theta = rng.uniform(0, 2 * np.pi, n_waves)
        self.freq = rng.uniform(*freq, n_waves)
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        amp = rng.uniform(0.5, 1.0, n_waves)
        self.amp = contrast * amp / amp.sum()

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.full(np.broadcast(x, y).shape, 0.5)
        for th, f, ph, a in zip(self.theta, self.freq, self.phase, self.amp):
            out += a * np.sin(2 * np.pi * f * (x * np.cos(th) + y * np.sin(th)) + ph)
        return out


def _agent_pattern(cls: SemanticClass, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Class signature in object coordinates (s, t) in [0, 1)."""
    k = 2 * np.pi * 3.0
    if cls is SemanticClass.PEDESTRIAN:
        return 0.5 + 0.3 * np.sin(k * s)
    if cls is SemanticClass.VEHICLE:
        return 0.5 + 0.3 * np.sin(k * t)
    return 0.5 + 0.3 * np.sin(k * s) * np.sin(k * t)


def _box(cx: float, cy: float, w: float, h: float, res: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean footprint of pixels whose index lies in [c - size/2, c + size/2), plus object coordinates."""
    xs = np.arange(res, dtype=np.float64)
    ys = np.arange(res, dtype=np.float64)
    x0, y0 = cx - w / 2, cy - h / 2
    s = (xs - x0) / w
    t = (ys - y0) / h
    inx = (s >= 0) & (s < 1)
    iny = (t >= 0) & (t < 1)
    foot = iny[:, None] & inx[None, :]
    return foot, s[None, :] * np.ones((res, 1)), t[:, None] * np.ones((1, res))


def _render(spec: ScenarioSpec, seed: int, with_agent: bool = True):
    res = spec.resolution
    n = spec.n_frames
    tex_rng = np.random.default_rng([spec.texture_seed, 0])
    bg_tex = SmoothTexture(tex_rng)
    agent_noise = SmoothTexture(tex_rng, n_waves=8, freq=(1.5, 4.0), contrast=0.5)
    dis_rng = np.random.default_rng([seed, 1])
    distractors = []
    for _ in range(spec.n_distractors):
        size = spec.distractor_size * dis_rng.uniform(0.7, 1.4)
        ang = dis_rng.uniform(0, 2 * np.pi)
        speed = spec.distractor_speed * dis_rng.uniform(0.5, 1.5)
        distractors.append({
            "pos": dis_rng.uniform(0, res, 2),
            "vel": speed * np.array([np.cos(ang), np.sin(ang)]),
            "w": size * dis_rng.uniform(0.7, 1.4),
            "h": size,
            "tex": SmoothTexture(dis_rng, n_waves=6, freq=(1.0, 3.0), contrast=0.5),
        })
    noise_rng = np.random.default_rng([seed, 2])

    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64)
    mid = (n - 1) / 2.0
    cls = spec.agent_class
    frames, masks, feet = [], [], []
    for f in range(n):
        img = bg_tex(xs - spec.ego_flow[0] * f, ys - spec.ego_flow[1] * f)
        for d in distractors:
            c = np.mod(d["pos"] + d["vel"] * f, res)
            foot, s, t = _box(c[0], c[1], d["w"], d["h"], res)
            img = np.where(foot, d["tex"](s, t), img)
        foot = np.zeros((res, res), dtype=bool)
        if cls is not None and with_agent:
            rate = spec.loom_gain / (NOMINAL_FPS * spec.ttc) if spec.loom_gain > 0 else 0.0
            h = spec.agent_size * math.exp(rate * (f - mid))
            aspect = spec.agent_aspect if spec.agent_aspect is not None else CLASS_ASPECT[cls]
            w = aspect * h
            cx0, cy0 = spec.agent_center if spec.agent_center is not None else (res / 2.0, res / 2.0)
            dx, dy = np.cos(spec.agent_heading), np.sin(spec.agent_heading)
            cx = cx0 + spec.agent_speed * (f - mid) * dx
            cy = cy0 + spec.agent_speed * (f - mid) * dy
            foot, s, t = _box(cx, cy, w, h, res)
            agent = 0.5 * _agent_pattern(cls, s, t) + 0.5 * agent_noise(s, t)
            img = np.where(foot, agent, img)
        if spec.noise > 0:
            img = img + noise_rng.normal(0.0, spec.noise, img.shape)
        img = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255) / 255.0
        frames.append(img)
        mask = np.zeros((res, res), dtype=np.uint8)
        if cls is not None:
            mask[foot] = int(cls)
        masks.append(mask)
        feet.append(foot)
    return frames, masks, feet


def generate_clip(spec: ScenarioSpec, seed: int = 0) -> GeneratedClip:
    risk = ttc_label(spec.ttc)
    if risk == "excluded":
        raise ExcludedScenario(f"TTC {spec.ttc:.3f} s lies in the excluded band [0.5, 2.0] s")
    frames, masks, feet = _render(spec, seed)
    label = IncidentClass.from_parts(risk, spec.agent_class)
    meta = {"fps": NOMINAL_FPS, "trigger_g": TRIGGER_G, "trigger_seconds": TRIGGER_SECONDS, "seed": seed}
    return GeneratedClip(frames, masks, label, spec.ttc, feet, meta)


# -- datasets ---------------------------------------------------------------

NIDB_TOTALS = dict(zip(IncidentClass, (570, 388, 718, 976, 946, 996, 1650)))
NIDB_TEST = dict(zip(IncidentClass, (100, 50, 100, 100, 100, 100, 550)))

CONFIG_VERSION = 1

BASE_CONFIG: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "name": "custom",
    "resolution": 64,
    "n_frames": 20,
    "counts": {c.value: [10, 3] for c in IncidentClass},
    "distractors": [1, 3],
    "distractor_speed": [0.5, 2.0],
    "distractor_size": 10.0,
    "ego_speed": 1.0,
    "agent_size": [20.0, 26.0],
    "high_ttc": [0.2, 0.45],
    "low_ttc": [2.2, 4.0],
    "high_speed": [1.6, 2.6],
    "low_speed": [0.6, 1.2],
    "high_heading": [-0.4, 0.4],  # radians around the image x axis; mirrored half the time
    "low_heading": [-0.4, 0.4],
    "noise": 0.01,
}


def _preset(name: str, train: int, test: int, **overrides) -> dict[str, Any]:
    cfg = dict(BASE_CONFIG, name=name, counts={c.value: [train, test] for c in IncidentClass})
    cfg.update(overrides)
    return cfg


def nidb_counts(scale_down: int = 1) -> dict[str, list[int]]:
    """Train/test counts shaped like the real dataset, divided by ``scale_down`` (rounded up)."""
    out = {}
    for c in IncidentClass:
        test = math.ceil(NIDB_TEST[c] / scale_down)
        total = math.ceil(NIDB_TOTALS[c] / scale_down)
        out[c.value] = [max(total - test, 1), test]
    return out


PRESETS: dict[str, dict[str, Any]] = {
    "e2e": _preset("e2e", 30, 10),
    "distractor-heavy": _preset("distractor-heavy", 20, 8, distractors=[5, 7], distractor_speed=[0.8, 2.2]),
    # High-risk agents travel along the road axis (image vertical), low-risk ones cross it.
    "motion-dominated": _preset("motion-dominated", 20, 8, distractors=[1, 2],
                                high_heading=[np.pi / 2 - 0.4, np.pi / 2 + 0.4]),
    "smoke": _preset("smoke", 4, 2),
    "nidb": dict(BASE_CONFIG, name="nidb", counts=nidb_counts(1)),
}


def load_config(path: str | os.PathLike | None = None, preset: str | None = None) -> dict[str, Any]:
    """Merge a YAML scenario config over a preset (default: the base config)."""
    cfg = dict(PRESETS[preset]) if preset else dict(BASE_CONFIG)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported scenario config version {user.get('version')}")
        user.pop("seed", None)
        if "preset" in user:
            cfg = dict(PRESETS[user.pop("preset")])
        cfg.update(user)
    unknown = set(cfg) - set(BASE_CONFIG)
    if unknown:
        raise ValueError(f"unknown scenario config keys: {sorted(unknown)}")
    return cfg


def sample_spec(label: IncidentClass, cfg: Mapping[str, Any], rng: np.random.Generator, texture_seed: int) -> ScenarioSpec:
    res = int(cfg["resolution"])
    ego_ang = rng.uniform(0, 2 * np.pi)
    ego = float(cfg["ego_speed"]) * rng.uniform(0.3, 1.0)
    lo, hi = cfg["distractors"]
    common = dict(
        ego_flow=(ego * math.cos(ego_ang), ego * math.sin(ego_ang)),
        n_frames=int(cfg["n_frames"]),
        resolution=res,
        texture_seed=texture_seed,
        n_distractors=int(rng.integers(lo, hi + 1)),
        distractor_speed=float(rng.uniform(*cfg["distractor_speed"])),
        distractor_size=float(cfg["distractor_size"]) * res / 64.0,
        noise=float(cfg["noise"]),
    )
    if label is IncidentClass.BACKGROUND:
        return ScenarioSpec(agent_class=None, **common)
    risk = label.risk
    ttc = float(rng.uniform(*cfg[f"{risk}_ttc"]))
    closing_speed = float(rng.uniform(5.0, 15.0))
    heading = (0.0 if rng.random() < 0.5 else np.pi) + rng.uniform(*cfg[f"{risk}_heading"])
    return ScenarioSpec(
        agent_class=label.agent,
        agent_size=float(rng.uniform(*cfg["agent_size"])) * res / 64.0,
        agent_speed=float(rng.uniform(*cfg[f"{risk}_speed"])),
        agent_heading=float(heading),
        agent_center=(float(rng.uniform(0.4, 0.6) * res), float(rng.uniform(0.4, 0.6) * res)),
        closing_distance=ttc * closing_speed,
        closing_speed=closing_speed,
        **common,
    )


@dataclass(frozen=True)
class PlannedClip:
    clip_id: str
    label: IncidentClass
    split: str
    spec: ScenarioSpec
    seed: int


def plan_dataset(cfg: Mapping[str, Any], seed: int = 0) -> list[PlannedClip]:
    """Every clip's scenario, derived only from (seed, class, index)."""
    plan = []
    for ci, cls in enumerate(IncidentClass):
        train, test = cfg["counts"].get(cls.value, [0, 0])
        for i in range(train + test):
            ss = np.random.SeedSequence([seed, ci, i])
            clip_seed, tex_seed = (int(x) for x in ss.generate_state(2))
            rng = np.random.default_rng(ss)
            spec = sample_spec(cls, cfg, rng, tex_seed)
            split = "train" if i < train else "test"
            plan.append(PlannedClip(f"{cls.value}_{i:04d}", cls, split, spec, clip_seed))
    return plan


def generate_dataset(cfg: Mapping[str, Any], out_dir: str | os.PathLike, seed: int = 0) -> list[ClipRecord]:
    """Render every planned clip under ``out_dir`` and write ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    records = []
    for item in plan_dataset(cfg, seed):
        clip = generate_clip(item.spec, item.seed)
        if clip.label is not item.label:
            raise RuntimeError(f"{item.clip_id}: rendered label {clip.label} != planned {item.label}")
        frame_dir = out_dir / "clips" / item.clip_id / "frames"
        mask_dir = out_dir / "clips" / item.clip_id / "masks"
        write_frames(clip.frames, frame_dir)
        write_masks(clip.masks, mask_dir)
        records.append(ClipRecord(item.clip_id, frame_dir.resolve(), item.label, item.split, mask_dir.resolve(), clip.ttc))
    write_manifest(records, out_dir / "manifest.jsonl")
    with open(out_dir / "scenario_config.yaml", "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(dict(cfg, seed=seed), fh, sort_keys=True)
    log.info("wrote %d clips to %s", len(records), out_dir)
    return records


def spec_to_dict(spec: ScenarioSpec) -> dict[str, Any]:
    d = asdict(spec)
    d["agent_class"] = None if spec.agent_class is None else spec.agent_class.name.lower()
    return d
