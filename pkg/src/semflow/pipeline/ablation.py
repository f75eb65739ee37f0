"""Six-configuration ablation over feature streams, codebook data and channels."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..clipio import ClipRecord
from ..featuremaps import LAYERS
from .config import PipelineConfig
from .extract import PartialFailure, run_extract
from .train import ANALOG_NOTE, Probe, encode_all, evaluate_vectors, fit_encoders, train_classifier

log = logging.getLogger(__name__)

TASKS = ("recognition", "detection")
SPATIAL = ("spa4", "spa5")


@dataclass(frozen=True)
class AblationColumn:
    name: str
    overrides: dict = field(default_factory=dict)


def ablation_matrix() -> list[AblationColumn]:
    """Columns in table order; every column adds one ingredient to the previous one."""
    steps = [
        ("spatial", dict(layers=SPATIAL, channels="off", codebook_source="generic", use_idt=False)),
        ("+temporal", dict(layers=LAYERS)),
        ("+background codebook", dict(codebook_source="background")),
        ("+near-miss codebook", dict(codebook_source="all")),
        ("+fg/bg (ours1)", dict(channels="combined")),
        ("+IDT (ours2)", dict(use_idt=True)),
    ]
    cols, acc = [], {}
    for name, delta in steps:
        acc = {**acc, **delta}
        cols.append(AblationColumn(name, dict(acc)))
    return cols


SEPARATED_ROW = AblationColumn("separated semantics", {**ablation_matrix()[4].overrides, "channels": "separated"})


@dataclass
class AblationResult:
    columns: list[str]
    accuracy: dict[str, dict[str, float]]  # column -> task -> accuracy
    extra: dict[str, dict[str, float]]
    partial: bool = False
    error: str | None = None

    def table(self) -> str:
        head = "task".ljust(12) + "".join(f"  {i + 1:>6}" for i in range(len(self.columns)))
        lines = [ANALOG_NOTE.rstrip("\n")]
        if self.partial:
            lines.append(f"# PARTIAL RESULTS: {self.error}")
        lines.append("# columns:")
        lines += [f"#   {i + 1}: {c}" for i, c in enumerate(self.columns)]
        lines.append(head)
        for task in TASKS:
            row = task.ljust(12)
            for c in self.columns:
                v = self.accuracy.get(c, {}).get(task)
                row += "  " + ("   n/a" if v is None else f"{100 * v:6.1f}")
            lines.append(row)
        for name, accs in self.extra.items():
            lines.append(f"# extra row, {name}: " + ", ".join(f"{t} {100 * accs[t]:.1f}" for t in TASKS if t in accs))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"columns": self.columns, "accuracy": self.accuracy, "extra": self.extra,
                "partial": self.partial, "error": self.error}


def store_config(base: PipelineConfig) -> PipelineConfig:
    """Extraction settings that cover every ablation column."""
    return base.with_(channels="separated", layers=LAYERS, use_idt=True)


def run_ablation(
    records: Sequence[ClipRecord],
    base: PipelineConfig,
    store: str | os.PathLike,
    out: str | os.PathLike | None = None,
    columns: Sequence[int] | None = None,
    tasks: Sequence[str] = TASKS,
    extra_rows: bool = True,
    probe: Probe | None = None,
) -> AblationResult:
    """Run the matrix on both tasks; ``columns`` picks 1-based column numbers."""
    matrix = ablation_matrix()
    picked = [matrix[i - 1] for i in columns] if columns else matrix
    runs = picked + ([SEPARATED_ROW] if extra_rows and not columns else [])
    result = AblationResult([c.name for c in picked], {}, {})
    try:
        run_extract(records, store_config(base), store)
        cache: dict = {}
        for col in runs:
            cfg = base.with_(**col.overrides)
            enc = fit_encoders(records, cfg, store, probe, cache)
            vecs = encode_all(records, enc, cfg, store)
            accs = {}
            for task in tasks:
                tcfg = cfg.with_(task=task)
                model = train_classifier(vecs, tcfg, probe)
                accs[task] = evaluate_vectors(model, vecs, tcfg).accuracy
            target = result.extra if col is SEPARATED_ROW else result.accuracy
            target[col.name] = accs
            log.info("ablation %s: %s", col.name, accs)
    except Exception as exc:
        result.partial = True
        result.error = f"{type(exc).__name__}: {exc}"
        log.error("ablation aborted: %s", result.error)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(result.table())
        with open(out / "ablation.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"base_config": base.to_dict(), **result.to_dict()}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if result.partial:
        err = PartialFailure(result.error)
        err.result = result
        raise err
    return result
