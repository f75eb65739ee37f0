import json

import cv2
import numpy as np
import pytest

from semflow.clipio import (
    ClipError, ClipRecord, ManifestError, load_clip, load_masks, read_frame, read_manifest,
    split_counts, write_frames, write_manifest, write_masks,
)
from semflow.labels import IncidentClass, SemanticClass
from semflow.synthscenes import ScenarioSpec, generate_clip


def _write_clip(tmp_path, n=16, masks=True):
    spec = ScenarioSpec(agent_class=SemanticClass.VEHICLE, n_frames=n, closing_distance=3.0, closing_speed=10.0)
    clip = generate_clip(spec, seed=5)
    write_frames(clip.frames, tmp_path / "f")
    if masks:
        write_masks(clip.masks, tmp_path / "m")
    rec = ClipRecord("c0", tmp_path / "f", clip.label, "train", tmp_path / "m" if masks else None, clip.ttc)
    return clip, rec


def test_roundtrip_pixel_identical(tmp_path):
    clip, rec = _write_clip(tmp_path)
    frames = load_clip(rec)
    assert len(frames) == 16
    for a, b in zip(frames, clip.frames):
        assert np.array_equal(a, b)
    masks = load_masks(rec, len(frames), frames[0].shape)
    for a, b in zip(masks, clip.masks):
        assert np.array_equal(a, b)


def test_load_order_stable(tmp_path):
    _, rec = _write_clip(tmp_path)
    a = load_clip(rec)
    b = load_clip(rec)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_mask_count_mismatch(tmp_path):
    _, rec = _write_clip(tmp_path)
    (tmp_path / "m" / "mask_000015.png").unlink()
    with pytest.raises(ClipError, match="mask count 15"):
        load_masks(rec)


def test_missing_directory(tmp_path):
    rec = ClipRecord("x", tmp_path / "nope", IncidentClass.BACKGROUND, "test")
    with pytest.raises(ClipError, match="missing directory"):
        load_clip(rec)


def test_dimension_mismatch(tmp_path):
    d = tmp_path / "f"
    write_frames([np.zeros((40, 40)), np.zeros((40, 48))], d)
    with pytest.raises(ClipError, match="dimension mismatch"):
        load_clip(ClipRecord("x", d, IncidentClass.BACKGROUND, "train"))


def test_too_small(tmp_path):
    d = tmp_path / "f"
    write_frames([np.zeros((16, 16))] * 3, d)
    with pytest.raises(ClipError, match="minimum"):
        load_clip(ClipRecord("x", d, IncidentClass.BACKGROUND, "train"))


def test_bad_mask_code(tmp_path):
    d = tmp_path / "m"
    d.mkdir()
    cv2.imwrite(str(d / "mask_000000.png"), np.full((40, 40), 7, np.uint8))
    rec = ClipRecord("x", tmp_path, IncidentClass.BACKGROUND, "train", d)
    with pytest.raises(ClipError, match="out of range"):
        load_masks(rec, n_frames=1)
    with pytest.raises(ClipError):
        write_masks([np.full((4, 4), 5)], tmp_path / "m2")


def test_color_frame_uses_luma(tmp_path):
    img = np.zeros((40, 40, 3), np.uint8)
    img[..., 0], img[..., 1], img[..., 2] = 10, 100, 200  # B, G, R
    cv2.imwrite(str(tmp_path / "frame_000000.png"), img)
    got = read_frame(tmp_path / "frame_000000.png")
    assert got[0, 0] == pytest.approx((0.299 * 200 + 0.587 * 100 + 0.114 * 10) / 255)


def _records(tmp_path):
    return [
        ClipRecord("a", tmp_path / "clips" / "a" / "frames", IncidentClass.HIGH_BICYCLE, "train",
                   tmp_path / "clips" / "a" / "masks", 0.3),
        ClipRecord("b", tmp_path / "clips" / "b" / "frames", IncidentClass.BACKGROUND, "test", None, None),
    ]


def test_manifest_roundtrip(tmp_path):
    recs = _records(tmp_path)
    write_manifest(recs, tmp_path / "manifest.jsonl")
    assert read_manifest(tmp_path / "manifest.jsonl") == recs
    raw = (tmp_path / "manifest.jsonl").read_bytes()
    assert b"\r\n" not in raw
    first = json.loads(raw.splitlines()[0])
    assert list(first) == ["clip_id", "frame_dir", "mask_dir", "label", "split", "ttc"]
    assert first["frame_dir"] == "clips/a/frames"


def test_manifest_duplicate(tmp_path):
    recs = _records(tmp_path)
    with pytest.raises(ManifestError, match="duplicate"):
        write_manifest([recs[0], recs[0]], tmp_path / "m.jsonl")
    line = json.dumps({"clip_id": "a", "frame_dir": "x", "mask_dir": None, "label": "background",
                       "split": "train", "ttc": None})
    (tmp_path / "m.jsonl").write_text(line + "\n" + line + "\n")
    with pytest.raises(ManifestError, match=":2: duplicate"):
        read_manifest(tmp_path / "m.jsonl")


@pytest.mark.parametrize("bad", [
    "{not json",
    json.dumps({"clip_id": "a"}),
    json.dumps({"clip_id": "a", "frame_dir": "x", "mask_dir": None, "label": "nope", "split": "train", "ttc": None}),
    json.dumps({"clip_id": "a", "frame_dir": "x", "mask_dir": None, "label": "background", "split": "dev", "ttc": None}),
])
def test_manifest_malformed_reports_line(tmp_path, bad):
    good = json.dumps({"clip_id": "z", "frame_dir": "x", "mask_dir": None, "label": "background",
                       "split": "train", "ttc": None})
    (tmp_path / "m.jsonl").write_text(good + "\n" + bad + "\n")
    with pytest.raises(ManifestError, match=r"m\.jsonl:2:"):
        read_manifest(tmp_path / "m.jsonl")


def test_split_counts(tmp_path):
    counts = split_counts(_records(tmp_path), "train")
    assert counts[IncidentClass.HIGH_BICYCLE] == 1
    assert sum(counts.values()) == 1
