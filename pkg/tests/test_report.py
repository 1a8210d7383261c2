import shutil

import numpy as np

from zsq_forge.ablation import SUMMARY_COLUMNS
from zsq_forge.difficulty import histogram
from zsq_forge.pipeline import write_metrics, write_rows
from zsq_forge.report import render_report


def _fixture_run(root):
    a = root / "analysis"
    a.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for name, shape in (("real", 0.3), ("FNL", 0.5), ("HFNL", 1.5)):
        histogram(rng.beta(shape, 2.0, 300), 10).to_csv(a / f"hist_{name}.csv")
    r = histogram(rng.random(100), 10)
    r.error_rates = np.linspace(0, 1, 10)
    r.to_csv(a / "error_by_difficulty.csv")
    write_rows(a / "loss_curves.csv",
               [{"mode": m, "iteration": t, "objective": 1 / (t + 1), "bns": 0.5, "label_term": 0.1, "il": 2 / (t + 1),
                 "mean_difficulty": 0.5 + k * 0.1, "lr": 0.5} for k, m in enumerate(("FNL", "HFNL")) for t in range(20)])
    (root / "ablation").mkdir()
    write_rows(root / "ablation" / "ablation.csv",
               [{"hss": h, "sdp": s, "fa": f, "seed": 0, "top1": 0.8 + 0.01 * (h + s + f), "top1_std": 0.01,
                 "seeds_ok": 3, "status": "ok"} for h in (0, 1) for s in (0, 1) for f in (0, 1)], SUMMARY_COLUMNS)
    (root / "finetune").mkdir()
    write_metrics(root / "finetune" / "metrics.csv",
                  [{"epoch": e, "lr": 0.1, "train_loss": 1.0, "fa_term": 0.1, "kl_term": 0.2, "test_top1": 0.5 + e / 10}
                   for e in range(3)])


def test_report_is_a_pure_function_of_csvs(tmp_path):
    _fixture_run(tmp_path)
    first = {p.name: p.read_bytes() for p in render_report(tmp_path)}
    assert {"difficulty_histogram.svg", "error_by_difficulty.svg", "synthesis_curves.svg", "ablation.svg",
            "finetune_curves.svg", "ablation.png"} <= set(first)
    shutil.rmtree(tmp_path / "plots")
    second = {p.name: p.read_bytes() for p in render_report(tmp_path)}
    assert first.keys() == second.keys()
    for name in first:
        if name.endswith(".svg"):
            assert first[name] == second[name], name


def test_report_on_empty_directory(tmp_path):
    assert render_report(tmp_path) == []
