"""The 2x2x2 component grid: hard-sample synthesis x difficulty promotion x feature alignment."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .config import ExperimentConfig
from .pipeline import (ensure_synthetic, ensure_teacher, load_data, run_finetune, synthesis_config, write_manifest,
                       write_rows)
from .toydata import DivergenceError

log = logging.getLogger(__name__)

RUN_COLUMNS = ["hss", "sdp", "fa", "seed", "top1", "best_top1", "status"]
SUMMARY_COLUMNS = ["hss", "sdp", "fa", "seed", "top1", "top1_std", "seeds_ok", "status"]


@dataclass(frozen=True)
class Toggles:
    hss: bool
    sdp: bool
    fa: bool

    @property
    def tag(self) -> str:
        return f"hss{int(self.hss)}_sdp{int(self.sdp)}_fa{int(self.fa)}"


GRID = tuple(Toggles(*bits) for bits in itertools.product((False, True), repeat=3))


@dataclass
class AblationRow:
    toggles: Toggles
    seeds: list[int]
    top1: list[float] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.top1) and not self.failed

    @property
    def mean(self) -> float:
        return statistics.fmean(self.top1) if self.top1 else float("nan")

    @property
    def std(self) -> float:
        return statistics.pstdev(self.top1) if len(self.top1) > 1 else 0.0


@dataclass
class AblationGrid:
    rows: list[AblationRow]
    base_seed: int

    def row(self, hss: bool, sdp: bool, fa: bool) -> AblationRow:
        return next(r for r in self.rows if r.toggles == Toggles(hss, sdp, fa))

    @property
    def full(self) -> AblationRow:
        return self.row(True, True, True)

    @property
    def empty(self) -> AblationRow:
        return self.row(False, False, False)

    def best(self) -> AblationRow:
        return max((r for r in self.rows if r.ok), key=lambda r: r.mean)

    def full_ge_empty(self) -> bool:
        return self.full.ok and self.empty.ok and self.full.mean >= self.empty.mean

    def summary_rows(self) -> list[dict]:
        return [{"hss": int(r.toggles.hss), "sdp": int(r.toggles.sdp), "fa": int(r.toggles.fa),
                 "seed": self.base_seed, "top1": repr(r.mean), "top1_std": repr(r.std),
                 "seeds_ok": len(r.top1), "status": "ok" if r.ok else "failed"} for r in self.rows]


def row_config(cfg: ExperimentConfig, toggles: Toggles, seed: int) -> ExperimentConfig:
    """The experiment configuration of one grid cell and fine-tuning seed.

    Switched-on components take their settings from ``cfg``: the HFNL
    synthesis with its ``gamma`` and the promotion ``epsilon``.
    """
    out = copy.deepcopy(cfg)
    out.synthesis = replace(out.synthesis, mode="HFNL" if toggles.hss else "FNL")
    ft = out.finetune
    ft.seed = seed
    ft.objective = "HAST" if toggles.fa else "baseline_CE_KL"
    if not toggles.sdp:
        ft.promotion = replace(ft.promotion, epsilon=0.0)
    return out


def run_ablation(cfg: ExperimentConfig, out: Path, base_seed: Optional[int] = None) -> AblationGrid:
    """Fine-tune every grid cell for ``cfg.ablation.seeds`` seeds and write CSVs under ``out/ablation``.

    Teacher, dataset and the two synthetic sets (with and without the hard
    sample term) are shared by all cells; the seed varies fine-tuning only.
    A diverging run marks its row failed and the grid continues.
    """
    base_seed = cfg.finetune.seed if base_seed is None else base_seed
    directory = out / "ablation"
    seeds = [base_seed + k for k in range(cfg.ablation.seeds)]
    data = load_data(cfg)
    train, test = data
    teacher = ensure_teacher(cfg, out, data)
    synthetic = {}
    for hss in (False, True):
        syn_cfg = synthesis_config(row_config(cfg, Toggles(hss, False, False), base_seed))
        synthetic[hss] = ensure_synthetic(cfg, teacher, out, syn_cfg, train.bounds())
    rows, runs = [], []
    for toggles in GRID:
        row = AblationRow(toggles, seeds)
        for seed in seeds:
            rcfg = row_config(cfg, toggles, seed)
            run_dir = directory / toggles.tag / f"seed{seed}"
            write_manifest(run_dir, rcfg, "ablate", {"finetune": seed, "data": cfg.data.seed,
                                                     "teacher": cfg.teacher.seed, "synthesis": cfg.synthesis.seed})
            try:
                outcome = run_finetune(rcfg, teacher, synthetic[toggles.hss], test, run_dir)
            except DivergenceError as err:
                log.error("%s seed %d diverged: %s", toggles.tag, seed, err)
                row.failed.append(seed)
                runs.append({"hss": int(toggles.hss), "sdp": int(toggles.sdp), "fa": int(toggles.fa), "seed": seed,
                             "top1": "", "best_top1": "", "status": "failed"})
                continue
            top1 = outcome.state.final_top1
            row.top1.append(top1)
            runs.append({"hss": int(toggles.hss), "sdp": int(toggles.sdp), "fa": int(toggles.fa), "seed": seed,
                         "top1": repr(top1), "best_top1": repr(outcome.state.best_top1), "status": "ok"})
            log.info("%s seed %d top-1 %.4f", toggles.tag, seed, top1)
        rows.append(row)
    grid = AblationGrid(rows, base_seed)
    write_rows(directory / "ablation.csv", grid.summary_rows(), SUMMARY_COLUMNS)
    write_rows(directory / "ablation_runs.csv", runs, RUN_COLUMNS)
    verdict = {"full_ge_empty": grid.full_ge_empty(), "full_mean": grid.full.mean, "empty_mean": grid.empty.mean}
    if any(r.ok for r in rows):
        best = grid.best()
        verdict.update(best=best.toggles.tag, best_mean=best.mean,
                       full_within_1std_of_best=grid.full.ok and best.mean - grid.full.mean <= best.std)
    (directory / "verdict.json").write_text(json.dumps(verdict, indent=2))
    if not verdict["full_ge_empty"]:
        log.warning("full configuration (%.4f) did not reach the empty configuration (%.4f)",
                    grid.full.mean, grid.empty.mean)
    return grid


def read_summary(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
