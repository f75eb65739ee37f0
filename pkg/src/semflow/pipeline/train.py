"""Codebook fitting, clip encoding, classifier training and evaluation."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..classifier import LinearModel, Metrics, evaluate, train_ovr
from ..clipio import ClipRecord
from ..encoding import (
    Codebook, PcaModel, apply_pca, fit_kmeans, fit_pca, load_codebook, load_pca,
    save_codebook, save_pca, vlad_encode,
)
from ..labels import IncidentClass, task_spec
from ..semanticflow import CLASS_TAGS, MODE_TAGS
from .config import PipelineConfig, dump_config
from .extract import IDT_LAYERS, load_store

log = logging.getLogger(__name__)

Probe = Callable[[str, list[str]], None]
GENERIC_EVERY = 5

ANALOG_NOTE = (
    "# note: 'background' and 'near-miss' fine-tuning are emulated by fitting the\n"
    "# PCA/codebooks on background-only or on all-class train descriptors;\n"
    "# 'generic' fits them on a fixed 20% subset of train clips of every class.\n"
)


class LeakageError(RuntimeError):
    """A test-split clip reached a fitting stage."""


def guard(stage: str, records: Sequence[ClipRecord], probe: Probe | None = None) -> list[str]:
    leaked = sorted(r.clip_id for r in records if r.split != "train")
    if leaked:
        raise LeakageError(f"{stage}: test clips reached fitting: {leaked[:5]}")
    ids = sorted(r.clip_id for r in records)
    if probe is not None:
        probe(stage, ids)
    return ids


# -- descriptor blocks ------------------------------------------------------

def block_keys(cfg: PipelineConfig) -> list[tuple[str, str]]:
    layers = list(cfg.layers) + (["idt"] if cfg.use_idt else [])
    return [(tag, layer) for tag in MODE_TAGS[cfg.channels] for layer in layers]


def _merge_sources(stored_tags: set[str], tag: str) -> list[str]:
    """Stored channel tags that make up ``tag`` (coarser modes are unions of finer ones)."""
    if tag in stored_tags:
        return [tag]
    fine_fg = [t for t in CLASS_TAGS.values() if t in stored_tags]
    if tag == "fg" and "bg" in stored_tags:
        return fine_fg
    if tag == "all":
        if "fg" in stored_tags:
            return ["bg", "fg"]
        if "bg" in stored_tags:
            return ["bg"] + fine_fg
    raise ValueError(f"cannot build channel {tag!r} from stored channels {sorted(stored_tags)}")


def select_blocks(stored: dict[tuple[str, str], np.ndarray], cfg: PipelineConfig) -> dict[tuple[str, str], np.ndarray]:
    """Descriptor set per block of ``cfg``, merging finer stored channels when needed."""
    tags = {t for t, _ in stored}
    out = {}
    for tag, layer in block_keys(cfg):
        if not stored:
            out[(tag, layer)] = None
            continue
        parts = []
        for src in _merge_sources(tags, tag):
            if layer == "idt":
                missing = [l for l in IDT_LAYERS if (src, l) not in stored]
                if missing:
                    raise ValueError(f"store lacks IDT descriptors {missing}; extract with --with-idt")
                parts.append(np.hstack([stored[(src, l)] for l in IDT_LAYERS]))
            else:
                if (src, layer) not in stored:
                    raise ValueError(f"store lacks layer {layer!r} for channel {src!r}")
                parts.append(stored[(src, layer)])
        out[(tag, layer)] = np.vstack(parts)
    return out


# -- encoders ---------------------------------------------------------------

@dataclass
class BlockEncoder:
    tag: str
    layer: str
    in_dim: int
    pca: PcaModel | None = None
    codebook: Codebook | None = None

    @property
    def dim(self) -> int:
        return 0 if self.codebook is None else self.codebook.k * self.codebook.dim

    def encode(self, descs: np.ndarray | None) -> np.ndarray:
        if self.codebook is None:
            return np.zeros(0)
        if descs is None or len(descs) == 0:
            return np.zeros(self.dim)
        return vlad_encode(apply_pca(self.pca, descs), self.codebook)


@dataclass
class Encoders:
    blocks: list[BlockEncoder]
    source: str
    train_ids: list[str]

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    def encode(self, sets: dict[tuple[str, str], np.ndarray]) -> np.ndarray:
        parts = [b.encode(sets.get((b.tag, b.layer))) for b in self.blocks]
        v = np.concatenate(parts) if parts else np.zeros(0)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def save(self, out: str | os.PathLike) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        index = {"source": self.source, "train_ids": self.train_ids, "blocks": []}
        for b in self.blocks:
            entry = {"tag": b.tag, "layer": b.layer, "in_dim": b.in_dim, "pca": None, "codebook": None}
            if b.codebook is not None:
                entry["pca"] = f"pca_{b.tag}_{b.layer}.sfp"
                entry["codebook"] = f"codebook_{b.tag}_{b.layer}.sfc"
                save_pca(b.pca, out / entry["pca"], b.codebook.seed)
                save_codebook(b.codebook, out / entry["codebook"])
            index["blocks"].append(entry)
        (out / "encoders.json").write_text(json.dumps(index, indent=1) + "\n")

    @classmethod
    def load(cls, out: str | os.PathLike) -> "Encoders":
        out = Path(out)
        index = json.loads((out / "encoders.json").read_text())
        blocks = []
        for e in index["blocks"]:
            b = BlockEncoder(e["tag"], e["layer"], e["in_dim"])
            if e["codebook"]:
                b.pca = load_pca(out / e["pca"])
                b.codebook = load_codebook(out / e["codebook"])
            blocks.append(b)
        return cls(blocks, index["source"], index["train_ids"])


def codebook_records(records: Sequence[ClipRecord], source: str) -> list[ClipRecord]:
    """Train clips whose descriptors feed PCA and codebook fitting."""
    train = sorted((r for r in records if r.split == "train"), key=lambda r: r.clip_id)
    if source == "background":
        return [r for r in train if r.label is IncidentClass.BACKGROUND]
    if source == "generic":
        return train[::GENERIC_EVERY]
    return train


def _as_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def fit_block(X: np.ndarray, tag: str, layer: str, cfg: PipelineConfig, seed: int) -> BlockEncoder:
    d = X.shape[1] if X.ndim == 2 else 0
    block = BlockEncoder(tag, layer, d)
    if len(X) > cfg.codebook_samples:
        pick = np.sort(np.random.default_rng([seed, 1]).choice(len(X), cfg.codebook_samples, replace=False))
        X = X[pick]
    out_dim = min(cfg.pca_dim, d)
    if len(X) <= out_dim or not np.any(X - X.mean(axis=0)):
        log.warning("block %s/%s: %d descriptors are too few to fit; block disabled", tag, layer, len(X))
        return block
    pca = fit_pca(X, out_dim)
    pca = PcaModel(_as_f32(pca.mean), _as_f32(pca.basis), _as_f32(pca.explained_variance))
    Z = apply_pca(pca, X)
    k = min(cfg.n_clusters, len(np.unique(Z, axis=0)))
    if k < cfg.n_clusters:
        log.warning("block %s/%s: only %d distinct descriptors; using k=%d", tag, layer, k, k)
    cb = fit_kmeans(Z, k, seed=seed, max_iter=cfg.kmeans_max_iter)
    cb.centers = _as_f32(cb.centers)
    block.pca, block.codebook = pca, cb
    return block


def fit_encoders(
    records: Sequence[ClipRecord],
    cfg: PipelineConfig,
    store: str | os.PathLike,
    probe: Probe | None = None,
    cache: dict | None = None,
) -> Encoders:
    """Fit one PCA and codebook per (channel, layer) on train descriptors only."""
    recs = codebook_records(records, cfg.codebook_source)
    if not recs:
        raise ValueError(f"no train clips for codebook source {cfg.codebook_source!r}")
    ids = guard("codebook", recs, probe)
    sets = [select_blocks(load_store(store, cid), cfg) for cid in ids]
    blocks = []
    for bi, (tag, layer) in enumerate(block_keys(cfg)):
        key = (str(Path(store)), cfg.codebook_source, tag, layer, cfg.seed, cfg.pca_dim, cfg.n_clusters,
               cfg.codebook_samples, cfg.kmeans_max_iter, tuple(ids))
        if cache is not None and key in cache:
            blocks.append(cache[key])
            continue
        chunks = [s[(tag, layer)] for s in sets if s.get((tag, layer)) is not None]
        X = np.vstack(chunks) if chunks else np.zeros((0, 0))
        block = fit_block(X.astype(np.float64), tag, layer, cfg, seed=cfg.seed * 1000 + bi)
        if cache is not None:
            cache[key] = block
        blocks.append(block)
    return Encoders(blocks, cfg.codebook_source, ids)


def encode_records(records: Sequence[ClipRecord], enc: Encoders, cfg: PipelineConfig, store: str | os.PathLike) -> np.ndarray:
    return np.array([enc.encode(select_blocks(load_store(store, r.clip_id), cfg)) for r in records])


@dataclass
class ClipVectors:
    clip_ids: list[str]
    X: np.ndarray
    labels: list[IncidentClass]
    splits: list[str]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, clip_ids=np.array(self.clip_ids), X=self.X,
                     labels=np.array([c.value for c in self.labels]), splits=np.array(self.splits))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClipVectors":
        with np.load(path) as z:
            return cls([str(c) for c in z["clip_ids"]], z["X"],
                       [IncidentClass(str(c)) for c in z["labels"]], [str(s) for s in z["splits"]])

    def subset(self, split: str, task: str) -> tuple[np.ndarray, list[IncidentClass], list[str]]:
        classes = set(task_spec(task).classes)
        rows = [i for i, (s, c) in enumerate(zip(self.splits, self.labels)) if s == split and c in classes]
        return self.X[rows], [self.labels[i] for i in rows], [self.clip_ids[i] for i in rows]


def encode_all(records: Sequence[ClipRecord], enc: Encoders, cfg: PipelineConfig, store: str | os.PathLike) -> ClipVectors:
    records = sorted(records, key=lambda r: r.clip_id)
    X = encode_records(records, enc, cfg, store)
    return ClipVectors([r.clip_id for r in records], X, [r.label for r in records], [r.split for r in records])


def train_classifier(vecs: ClipVectors, cfg: PipelineConfig, probe: Probe | None = None) -> LinearModel:
    X, y, ids = vecs.subset("train", cfg.task)
    by_id = dict(zip(vecs.clip_ids, vecs.splits))
    leaked = sorted(i for i in ids if by_id[i] != "train")
    if leaked:
        raise LeakageError(f"classifier: test clips reached fitting: {leaked[:5]}")
    if probe is not None:
        probe("classifier", sorted(ids))
    return train_ovr(X, y, task_spec(cfg.task), cfg.C, cfg.svm_seed)


def evaluate_vectors(model: LinearModel, vecs: ClipVectors, cfg: PipelineConfig) -> Metrics:
    X, y, _ = vecs.subset("test", cfg.task)
    return evaluate(model, X, y)


def report_header(cfg: PipelineConfig, enc: Encoders | None = None) -> str:
    lines = ["# resolved config"] + [f"#   {l}" for l in dump_config(cfg).splitlines()]
    if enc is not None:
        lines.append(f"# clip vector dim: {enc.dim}")
    return "\n".join(lines) + "\n" + ANALOG_NOTE


def write_report(metrics: Metrics, cfg: PipelineConfig, out: str | os.PathLike, enc: Encoders | None = None, name: str = "report") -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_header(cfg, enc) + metrics.report())
    summary = {"config": cfg.to_dict(), "metrics": metrics.to_dict()}
    if enc is not None:
        summary["vector_dim"] = enc.dim
    with open(out / f"{name}.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_train_eval(
    records: Sequence[ClipRecord],
    cfg: PipelineConfig,
    store: str | os.PathLike,
    out: str | os.PathLike | None = None,
    probe: Probe | None = None,
    cache: dict | None = None,
) -> Metrics:
    enc = fit_encoders(records, cfg, store, probe, cache)
    vecs = encode_all(records, enc, cfg, store)
    model = train_classifier(vecs, cfg, probe)
    metrics = evaluate_vectors(model, vecs, cfg)
    if out is not None:
        write_report(metrics, cfg, out, enc)
    return metrics
