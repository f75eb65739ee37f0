import json
import logging

import numpy as np
import pytest

from semflow.clipio import ClipRecord, read_manifest, write_frames, write_manifest, write_masks
from semflow.labels import IncidentClass
from semflow.pipeline import (
    LeakageError, PartialFailure, PipelineConfig, ablation_matrix, config_from_dict, load_config,
    run_ablation, run_extract, run_train_eval,
)
from semflow.pipeline.config import dump_config
from semflow.pipeline.extract import load_store
from semflow.pipeline.train import (
    Encoders, block_keys, encode_all, fit_encoders, guard, select_blocks,
)
from semflow.synthscenes import PRESETS, generate_dataset

SMALL = dict(n_clusters=16, codebook_samples=3000)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = dict(PRESETS["smoke"], counts={c.value: [3, 1] for c in IncidentClass})
    generate_dataset(cfg, root, seed=11)
    return root, read_manifest(root / "manifest.jsonl")


@pytest.fixture(scope="module")
def store(dataset, tmp_path_factory):
    _, records = dataset
    out = tmp_path_factory.mktemp("store")
    cfg = PipelineConfig(channels="separated", use_idt=True, **SMALL)
    run_extract(records, cfg, out)
    return out, cfg


def test_config_roundtrip_and_validation(tmp_path):
    cfg = PipelineConfig(channels="separated", scales=(1.0, 0.5), seed=4)
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.yaml") == cfg
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"chanels": "off"})
    for bad in (dict(channels="both"), dict(layers=("conv1",)), dict(provider="external"), dict(task="x")):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)
    assert cfg.extraction_key() == cfg.with_(task="recognition", C=3.0).extraction_key()
    assert cfg.extraction_key() != cfg.with_(norm="none").extraction_key()


def test_extract_five_clips(dataset, tmp_path):
    _, records = dataset
    five = [r for r in records if r.label is not IncidentClass.BACKGROUND][:5]
    s = run_extract(five, PipelineConfig(), tmp_path)
    assert sorted(s.done) == sorted(r.clip_id for r in five) and not s.failed
    for r in five:
        sets = load_store(tmp_path, r.clip_id)
        assert len(sets[("fg", "spa4")]) > 0 and len(sets[("bg", "spa4")]) > 0
    index = json.loads((tmp_path / "index.json").read_text())
    assert all(index[r.clip_id]["status"] == "ok" for r in five)


def test_extract_is_byte_identical_and_cached(dataset, tmp_path):
    _, records = dataset
    few = records[:3]
    cfg = PipelineConfig(use_idt=True)
    run_extract(few, cfg, tmp_path / "a")
    run_extract(few, cfg, tmp_path / "b")
    for r in few:
        assert (tmp_path / "a" / f"{r.clip_id}.sfd").read_bytes() == (tmp_path / "b" / f"{r.clip_id}.sfd").read_bytes()
    again = run_extract(few, cfg, tmp_path / "a")
    assert sorted(again.cached) == sorted(r.clip_id for r in few) and not again.done
    changed = run_extract(few, cfg.with_(norm="none"), tmp_path / "a")
    assert len(changed.done) == 3


def test_static_scene_gives_empty_file(tmp_path, caplog):
    frames = [np.full((48, 48), 0.4)] * 16
    write_frames(frames, tmp_path / "f")
    write_masks([np.zeros((48, 48), np.uint8)] * 16, tmp_path / "m")
    rec = ClipRecord("static", tmp_path / "f", IncidentClass.BACKGROUND, "train", tmp_path / "m")
    with caplog.at_level(logging.WARNING):
        s = run_extract([rec], PipelineConfig(), tmp_path / "out")
    assert s.empty == ["static"]
    assert (tmp_path / "out" / "static.sfd").read_bytes() == b""
    assert load_store(tmp_path / "out", "static") == {}
    assert "no trajectories" in caplog.text


def test_failure_policy(dataset, store, tmp_path):
    _, records = dataset
    out, cfg = store
    bad = ClipRecord("zz_missing", tmp_path / "nope", IncidentClass.BACKGROUND, "train")
    s = run_extract(list(records[:10]) + [bad], cfg, out)  # 1 of 11 failed: under the limit
    assert list(s.failed) == ["zz_missing"]
    with pytest.raises(PartialFailure):
        run_extract(list(records[:5]) + [bad], cfg, out)


def test_trajectory_dump(dataset, tmp_path):
    _, records = dataset
    rec = next(r for r in records if r.label is IncidentClass.HIGH_VEHICLE)
    run_extract([rec], PipelineConfig(channels="separated"), tmp_path / "s", dump_dir=tmp_path / "d")
    lines = (tmp_path / "d" / f"{rec.clip_id}.traj").read_text().splitlines()
    assert lines
    tags = set()
    for line in lines:
        parts = line.split()
        assert parts[0] == rec.clip_id and len(parts) == 2 + 32 + 1
        tags.add(parts[-1])
    assert tags <= {"bg", "fg_bic", "fg_ped", "fg_veh"} and "fg_veh" in tags


def test_channel_merging(store, dataset):
    out, cfg = store
    _, records = dataset
    rec = next(r for r in records if r.label is IncidentClass.HIGH_PEDESTRIAN)
    stored = load_store(out, rec.clip_id)
    comb = select_blocks(stored, cfg.with_(channels="combined"))
    fine = np.vstack([stored[(t, "spa4")] for t in ("fg_bic", "fg_ped", "fg_veh")])
    assert np.array_equal(comb[("fg", "spa4")], fine)
    off = select_blocks(stored, cfg.with_(channels="off"))
    assert len(off[("all", "tem3")]) == sum(len(stored[(t, "tem3")]) for t in ("bg", "fg_bic", "fg_ped", "fg_veh"))
    idt = select_blocks(stored, cfg.with_(channels="combined"))[("bg", "idt")]
    assert idt.shape[1] == 396
    with pytest.raises(ValueError):
        select_blocks({("fg", "spa4"): np.zeros((1, 8))}, cfg.with_(channels="separated", layers=("spa4",), use_idt=False))


def test_leakage_guard_and_probe(dataset, store, tmp_path):
    _, records = dataset
    out, cfg = store
    seen = {}
    probe = lambda stage, ids: seen.setdefault(stage, []).append(ids)
    test_ids = {r.clip_id for r in records if r.split == "test"}
    for task in ("detection", "recognition"):
        run_train_eval(records, cfg.with_(channels="combined", task=task), out, tmp_path / task, probe)
    assert set(seen) == {"codebook", "classifier"}
    for stage, runs in seen.items():
        for ids in runs:
            assert ids and not test_ids & set(ids)
    assert not any(i.startswith("background") for i in seen["classifier"][1])
    with pytest.raises(LeakageError):
        guard("codebook", [r for r in records if r.split == "test"][:1])


def test_train_eval_reports(dataset, store, tmp_path):
    _, records = dataset
    out, cfg = store
    det = run_train_eval(records, cfg.with_(channels="combined"), out, tmp_path / "det")
    assert det.confusion.shape == (7, 7) and 0 <= det.accuracy <= 1
    assert det.confusion.sum() == 7
    rec = run_train_eval(records, cfg.with_(channels="combined", task="recognition"), out, tmp_path / "rec")
    assert rec.confusion.shape == (6, 6) and rec.confusion.sum() == 6
    summary = json.loads((tmp_path / "rec" / "report.json").read_text())
    assert summary["config"]["task"] == "recognition"
    text = (tmp_path / "rec" / "report.txt").read_text()
    assert "resolved config" in text and "task: recognition" in text
    again = tmp_path / "again"
    run_train_eval(records, cfg.with_(channels="combined", task="recognition"), out, again)
    assert (again / "report.txt").read_bytes() == (tmp_path / "rec" / "report.txt").read_bytes()


def test_encoders_roundtrip(dataset, store, tmp_path):
    _, records = dataset
    out, cfg = store
    c = cfg.with_(channels="combined")
    enc = fit_encoders(records, c, out)
    assert [(b.tag, b.layer) for b in enc.blocks] == block_keys(c)
    enc.save(tmp_path / "m")
    back = Encoders.load(tmp_path / "m")
    a = encode_all(records, enc, c, out)
    b = encode_all(records, back, c, out)
    assert np.array_equal(a.X, b.X)
    assert np.allclose(np.linalg.norm(a.X, axis=1), 1.0)


def test_ablation_matrix_structure():
    cols = ablation_matrix()
    assert len(cols) == 6
    feats = []
    for c in cols:
        o = c.overrides
        feats.append((len(o["layers"]), o["codebook_source"], o["channels"], o["use_idt"]))
    assert feats[0] == (2, "generic", "off", False)
    assert feats[1] == (4, "generic", "off", False)
    assert feats[2] == (4, "background", "off", False)
    assert feats[3] == (4, "all", "off", False)
    assert feats[4] == (4, "all", "combined", False)
    assert feats[5] == (4, "all", "combined", True)


def test_run_ablation_table(dataset, store, tmp_path):
    _, records = dataset
    out, cfg = store
    res = run_ablation(records, PipelineConfig(**SMALL), out, tmp_path)
    assert len(res.columns) == 6 and set(res.accuracy) == set(res.columns)
    assert all(set(v) == {"recognition", "detection"} for v in res.accuracy.values())
    assert "separated semantics" in res.extra
    table = (tmp_path / "ablation.txt").read_text()
    assert "recognition" in table and "detection" in table and "fine-tuning" in table
    assert json.loads((tmp_path / "ablation.json").read_text())["partial"] is False


def test_ablation_flags_partial_results(dataset, tmp_path):
    _, records = dataset
    broken = [r for r in records if r.label is not IncidentClass.BACKGROUND]  # background codebook impossible
    with pytest.raises(PartialFailure) as info:
        run_ablation(broken, PipelineConfig(**SMALL), tmp_path / "s", tmp_path, columns=[2, 3],
                     tasks=("recognition",))
    assert info.value.result.partial
    assert list(info.value.result.accuracy) == ["+temporal"]
    assert json.loads((tmp_path / "ablation.json").read_text())["partial"] is True
