"""Command-line entry point.

Subcommands: synth, descriptors, train, eval, agreement, activations.
Every subcommand takes --config/--seed/--out/--dump-config; all randomness
flows from the single resolved seed through named sub-streams. Exit codes:
0 success, 2 usage or contract violations, 3 numerical failures. The env
var SMK_THREADS caps the worker count of file-parallel stages.
"""
from __future__ import annotations

import argparse
import glob as globlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .analysis import domain_tallies
from .config import ExperimentConfig
from .descriptors import compute_descriptors
from .errors import NumericalFailureError, SarmoeError
from .evaluation import (
    BenchmarkManifest,
    discover_pairs,
    mean_agreement,
    run_benchmark,
)
from .model import init_toy_model, load_checkpoint, save_checkpoint
from .raster import (
    BasePattern,
    SpeckleSpec,
    generate_labeled_scene,
    read_labels,
    read_raster,
    write_labels,
    write_raster,
)
from .seeding import substream
from .training import train_toy


def _workers() -> int:
    return max(1, int(os.environ.get("SMK_THREADS", "1")))


def _resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, optimizer=replace(cfg.optimizer, seed=args.seed))
    return cfg


def _require_out(args, kind: str = "directory") -> Path:
    if not args.out:
        raise SarmoeError(f"--out {kind} is required for this command")
    return Path(args.out)


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    out = _require_out(args)
    looks = args.looks or [1.0, 16.0]
    rng = substream(cfg.optimizer.seed, "data")
    for looks_value in looks:
        domain_dir = out / f"L{looks_value:g}"
        domain_dir.mkdir(parents=True, exist_ok=True)
        for i in range(args.count):
            spec = SpeckleSpec(
                looks=looks_value,
                base_pattern=BasePattern(args.pattern),
                seed=int(rng.integers(2**63)),
            )
            img, lab = generate_labeled_scene(spec, args.width, args.height)
            write_raster(img, domain_dir / f"img_{i:03d}.srf")
            write_labels(lab, domain_dir / f"img_{i:03d}.slm")
    total = len(looks) * args.count
    print(f"wrote {total} image/label pairs under {out}")
    return 0


def _descriptor_row(path: str, cfg: ExperimentConfig) -> tuple[str, str | None]:
    """Returns (csv_row, error); exactly one is None."""
    try:
        vec = compute_descriptors(read_raster(path), cfg.descriptors)
    except (SarmoeError, OSError) as exc:
        return "", f"{path}: {exc}"
    flags = ";".join(sorted(vec.flags))
    return f"{path},{vec.h_de!r},{vec.enl!r},{vec.r_lr!r},{flags}", None


def cmd_descriptors(args, cfg: ExperimentConfig) -> int:
    out = _require_out(args, kind="CSV path")
    paths = sorted(globlib.glob(args.input_glob))
    if not paths:
        raise SarmoeError(f"no files match {args.input_glob!r}")
    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        results = list(pool.map(lambda p: _descriptor_row(p, cfg), paths))
    rows = [row for row, err in results if err is None]
    errors = [err for _, err in results if err is not None]
    if out.suffix != ".csv":
        out = out / "descriptors.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("path,h_de,enl,r_lr,flags\n" + "\n".join(rows) + ("\n" if rows else ""))
    for err in errors:
        print(err, file=sys.stderr)
    if errors:
        return 2
    print(f"wrote {len(rows)} descriptor rows to {out}")
    return 0


def _load_training_items(directory):
    items = []
    for raster_path, label_path, stem, tag in discover_pairs(directory):
        items.append((read_raster(raster_path), read_labels(label_path), tag))
    return items


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = _require_out(args)
    data_dir = args.data or cfg.data.train_dir
    if not data_dir:
        raise SarmoeError("no training data: pass --data or set data.train_dir in the config")
    items = _load_training_items(data_dir)
    model = init_toy_model(
        substream(cfg.optimizer.seed, "init"),
        channels=cfg.model.channels,
        hidden=cfg.model.hidden,
        num_experts=cfg.model.num_experts,
        top_k=cfg.model.top_k,
        num_blocks=cfg.model.num_blocks,
        patch_size=cfg.model.patch_size,
        num_classes=cfg.model.num_classes,
        lambda_bc=cfg.model.lambda_bc,
    )
    report = train_toy(model, items, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.smk")
    (out / "report.json").write_text(report.to_json())
    (out / "config.json").write_text(cfg.to_json())
    first, last = report.steps[0], report.steps[-1]
    print(
        f"trained {len(report.steps)} steps; seg loss {first.seg_loss:.4f} -> {last.seg_loss:.4f};"
        f" checkpoint at {out / 'checkpoint.smk'}"
    )
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out = _require_out(args)
    manifest = BenchmarkManifest.from_file(args.manifest)
    report, rows = run_benchmark(manifest, args.checkpoint, cfg.descriptors)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out / "report.csv").write_text(report.to_csv())
    per_image = "stem,miou\n" + "\n".join(f"{stem},{miou!r}" for stem, miou in rows) + "\n"
    (out / "per_image.csv").write_text(per_image)
    print(f"{manifest.abbreviation}: miou={report.miou:.4f} over {len(rows)} images")
    return 0


def cmd_agreement(args, cfg: ExperimentConfig) -> int:
    out = _require_out(args)
    prediction_sets = []
    stem_sets = []
    for directory in args.pred_dirs:
        directory = Path(directory)
        paths = sorted(directory.glob("*.slm"))
        stem_sets.append([p.stem for p in paths])
        prediction_sets.append([read_labels(p) for p in paths])
    if any(s != stem_sets[0] for s in stem_sets[1:]):
        raise SarmoeError("prediction directories do not cover the same image stems")
    report = mean_agreement(prediction_sets)
    out.mkdir(parents=True, exist_ok=True)
    (out / "agreement.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(f"mean agreement: {report.mean_agreement:.4f} over {len(report.per_image)} images")
    return 0


def cmd_activations(args, cfg: ExperimentConfig) -> int:
    out = _require_out(args)
    model = load_checkpoint(args.checkpoint)
    items = []
    for raster_path, label_path, stem, tag in discover_pairs(args.data):
        items.append((read_raster(raster_path), read_labels(label_path), tag))
    tallies = domain_tallies(model, items, cfg.descriptors)
    out.mkdir(parents=True, exist_ok=True)
    for tally in tallies:
        name = tally.domain_tag.replace("/", "_")
        (out / f"activations_{name}.csv").write_text(tally.to_csv())
        top = [int(r.argmax()) for r in tally.ratios()]
        print(f"{tally.domain_tag}: dominant expert per layer {top}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to an experiment config JSON")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", help="output directory (or CSV path for descriptors)")
    common.add_argument(
        "--dump-config",
        action="store_true",
        help="print the resolved config as JSON and exit",
    )

    parser = argparse.ArgumentParser(
        prog="sarmoe",
        description="Speckle synthesis, SAR physical descriptors, sparse-MoE toy training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="emit synthetic speckle domains")
    p.add_argument("--looks", type=float, action="append", help="looks level; repeatable")
    p.add_argument("--count", type=int, default=20, help="images per domain")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument(
        "--pattern",
        default="two-region",
        choices=[p.value for p in BasePattern],
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("descriptors", parents=[common], help="descriptor CSV for a file glob")
    p.add_argument("input_glob", help="glob of raster files (SRF1 or grayscale PNG)")
    p.set_defaults(func=cmd_descriptors)

    p = sub.add_parser("train", parents=[common], help="train the toy MoE segmenter")
    p.add_argument("--data", help="directory of image/label pairs (overrides config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a benchmark")
    p.add_argument("--manifest", required=True, help="benchmark manifest JSON")
    p.add_argument("--checkpoint", required=True, help="SMK1 checkpoint path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("agreement", parents=[common], help="multi-model agreement metric")
    p.add_argument("pred_dirs", nargs="+", help="two or more directories of .slm predictions")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("activations", parents=[common], help="expert-activation tallies")
    p.add_argument("--checkpoint", required=True, help="SMK1 checkpoint path")
    p.add_argument("--data", required=True, help="directory of image/label pairs")
    p.set_defaults(func=cmd_activations)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.dump_config:
            print(cfg.to_json())
            return 0
        return args.func(args, cfg)
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (SarmoeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
