"""Command line entry point.

Exit codes: 0 success, 1 validation error, 2 partial failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import synthscenes
from .binio import FormatError
from .classifier import LinearModel
from .clipio import ClipError, ManifestError, read_manifest
from .pipeline.ablation import run_ablation
from .pipeline.config import PipelineConfig, dump_config, load_config
from .pipeline.extract import PartialFailure, run_extract
from .pipeline.train import (
    ClipVectors, Encoders, LeakageError, encode_all, evaluate_vectors, fit_encoders,
    train_classifier, write_report,
)

log = logging.getLogger("semflow")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


def _resolve(args) -> PipelineConfig:
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "task", None):
        over["task"] = args.task
    if getattr(args, "channels", None):
        over["channels"] = args.channels
    if getattr(args, "with_idt", False):
        over["use_idt"] = True
    if getattr(args, "workers", None):
        over["workers"] = args.workers
    return cfg.with_(**over) if over else cfg


def _save_config(cfg: PipelineConfig, out: Path, name: str = "config.yaml") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(dump_config(cfg))


def cmd_gen_data(args) -> int:
    cfg = synthscenes.load_config(args.config, args.preset)
    records = synthscenes.generate_dataset(cfg, args.out, args.seed or 0)
    print(f"wrote {len(records)} clips to {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _resolve(args)
    records = read_manifest(args.manifest)
    _save_config(cfg, Path(args.out), "extract_config.yaml")
    s = run_extract(records, cfg, args.out, args.dump_trajectories)
    print(f"extracted {len(s.done)}, cached {len(s.cached)}, empty {len(s.empty)}, failed {len(s.failed)}")
    return EXIT_OK  # run_extract raises PartialFailure above the failure threshold


def cmd_codebook(args) -> int:
    cfg = _resolve(args)
    enc = fit_encoders(read_manifest(args.manifest), cfg, args.store)
    enc.save(args.out)
    _save_config(cfg, Path(args.out))
    print(f"fitted {sum(b.codebook is not None for b in enc.blocks)} of {len(enc.blocks)} blocks, vector dim {enc.dim}")
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = _resolve(args)
    enc = Encoders.load(args.models)
    vecs = encode_all(read_manifest(args.manifest), enc, cfg, args.store)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    vecs.save(args.out)
    print(f"encoded {len(vecs.clip_ids)} clips into {vecs.X.shape[1]}-dim vectors")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    vecs = ClipVectors.load(args.vectors)
    model = train_classifier(vecs, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"trained {cfg.task} model on {len(vecs.subset('train', cfg.task)[1])} clips")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = LinearModel.load(args.model)
    cfg = _resolve(args).with_(task=model.task.task)
    metrics = evaluate_vectors(model, ClipVectors.load(args.vectors), cfg)
    write_report(metrics, cfg, args.out)
    sys.stdout.write(metrics.report())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    cols = [int(c) for c in args.columns.split(",")] if args.columns else None
    if cols and any(not 1 <= c <= 6 for c in cols):
        raise ValueError("--columns takes numbers between 1 and 6")
    store = args.store or str(Path(args.out) / "store")
    result = run_ablation(read_manifest(args.manifest), cfg, store, args.out, cols)
    sys.stdout.write(result.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semflow", description="Semantic-flow trajectory descriptors for near-miss video classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        if manifest:
            sp.add_argument("--manifest", required=True)
        sp.add_argument("--config", help="pipeline config (YAML)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        sp.add_argument("--task", choices=("recognition", "detection"))
        sp.add_argument("--channels", choices=("combined", "separated", "off"))
        sp.add_argument("--with-idt", action="store_true")
        sp.add_argument("--workers", type=int)

    sp = sub.add_parser("gen-data", help="generate a synthetic labelled dataset")
    sp.add_argument("--config", help="scenario config (YAML)")
    sp.add_argument("--preset", choices=sorted(synthscenes.PRESETS))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("extract", help="extract per-clip descriptors")
    common(sp)
    sp.add_argument("--dump-trajectories", metavar="DIR")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("codebook", help="fit PCA and codebooks on train descriptors")
    common(sp)
    sp.add_argument("--store", required=True)
    sp.set_defaults(func=cmd_codebook)

    sp = sub.add_parser("encode", help="encode clips into VLAD vectors")
    common(sp)
    sp.add_argument("--store", required=True)
    sp.add_argument("--models", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("train", help="train one-vs-rest linear SVMs")
    common(sp, manifest=False)
    sp.add_argument("--vectors", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained model on the test split")
    common(sp, manifest=False)
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the six-column ablation on both tasks")
    common(sp)
    sp.add_argument("--store", help="descriptor store (default: <out>/store)")
    sp.add_argument("--columns", help="comma-separated subset of columns 1-6")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; keep 2 for partial failure
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PartialFailure as exc:
        log.error("partial failure: %s", exc)
        return EXIT_PARTIAL
    except (ValueError, KeyError, OSError, ClipError, ManifestError, FormatError, LeakageError,
            synthscenes.ExcludedScenario, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
