"""Command-line entry point: ``zsq-forge <subcommand> [--config PATH] [--seed N] [--out DIR] [--override k=v]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, load_config
from .storage import CheckpointError, load_checkpoint, save_synthetic
from .toydata import DivergenceError

log = logging.getLogger("zsq_forge")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
OUT_ENV = "ZSQ_FORGE_OUT"


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file or packaged preset name (e.g. toy)")
    p.add_argument("--seed", type=int, help="seed for synthesis and fine-tuning (data and teacher seeds stay as configured)")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, then the config's out_dir, then ./runs)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dot-path config override, e.g. finetune.epochs=1; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsq-forge", description="Zero-shot quantization experiments on toy data.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    helps = {
        "train-teacher": "train (or reuse) the full-precision teacher",
        "synthesize": "synthesize a dataset from the teacher",
        "finetune": "calibrate and fine-tune a quantized student",
        "evaluate": "report top-1 of a checkpoint on the toy test split",
        "analyze": "difficulty histograms, error-by-difficulty and synthesis curves",
        "ablate": "run the 8-configuration component grid",
        "report": "render CSV results to PNG and SVG",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (default: OUT/finetune/student.ckpt)")
    return parser


def resolve(args: argparse.Namespace) -> tuple[ExperimentConfig, Path]:
    overrides = list(args.override)
    if args.seed is not None:
        overrides += [f"synthesis.seed={args.seed}", f"finetune.seed={args.seed}"]
    cfg = load_config(args.config, overrides)
    out = Path(args.out or os.environ.get(OUT_ENV) or cfg.out_dir or "runs")
    cfg.out_dir = str(out)
    return cfg, out


def _seeds(cfg: ExperimentConfig) -> dict:
    return {"data": cfg.data.seed, "teacher": cfg.teacher.seed, "synthesis": cfg.synthesis.seed,
            "finetune": cfg.finetune.seed}


def cmd_train_teacher(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .pipeline import cache_dir, ensure_teacher
    from .storage import read_header

    ensure_teacher(cfg, out)
    src = cache_dir(out) / f"teacher-{cfg.digest('data', 'teacher')}.ckpt"
    directory = out / "train-teacher"
    directory.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, directory / "teacher.ckpt")
    report = read_header(src)[0]["meta"]["report"]
    return {"test_top1": report["test_top1"], "train_top1": report["train_top1"]}


def cmd_synthesize(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .pipeline import ensure_synthetic, ensure_teacher, load_data

    train, test = load_data(cfg)
    teacher = ensure_teacher(cfg, out, (train, test))
    ds = ensure_synthetic(cfg, teacher, out, bounds=train.bounds())
    save_synthetic(ds, out / "synthesize" / "dataset")
    return {"samples": len(ds), "sha256": ds.digest(), "mean_difficulty": float(ds.d_teacher.mean())}


def cmd_finetune(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .pipeline import ensure_synthetic, ensure_teacher, load_data, run_finetune

    train, test = load_data(cfg)
    teacher = ensure_teacher(cfg, out, (train, test))
    ds = ensure_synthetic(cfg, teacher, out, bounds=train.bounds())
    res = run_finetune(cfg, teacher, ds, test, out / "finetune")
    s = res.state
    return {"pre_top1": res.pre_top1, "final_top1": s.final_top1, "best_top1": s.best_top1,
            "best_epoch": s.best_epoch, "perturb_warnings": s.perturb_warnings}


def cmd_evaluate(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .finetune import evaluate
    from .pipeline import load_data

    path = Path(args.checkpoint) if args.checkpoint else out / "finetune" / "student.ckpt"
    model = load_checkpoint(path)
    _, test = load_data(cfg)
    return {"checkpoint": str(path), "test_top1": evaluate(model, test.images, test.labels)}


def cmd_analyze(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .analysis import run_analysis

    shift = run_analysis(cfg, out)
    return {**asdict(shift), "shifted": shift.shifted}


def cmd_ablate(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .ablation import run_ablation

    grid = run_ablation(cfg, out, args.seed)
    return {"rows": grid.summary_rows(), "full_ge_empty": grid.full_ge_empty()}


def cmd_report(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .report import render_report

    return {"figures": [str(p) for p in render_report(out)]}


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "synthesize": cmd_synthesize,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "report": cmd_report,
}
RUN_DIRS = {"analyze": "analysis", "ablate": "ablation"}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg, out = resolve(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    from .pipeline import write_manifest

    run_dir = out / RUN_DIRS.get(args.command, args.command)
    try:
        result = COMMANDS[args.command](cfg, out, args)
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        write_manifest(run_dir, cfg, args.command, _seeds(cfg), {"status": "diverged", "error": str(err)})
        return EXIT_DIVERGED
    except (CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE
    write_manifest(run_dir, cfg, args.command, _seeds(cfg), {"status": "ok", "result": result})
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
