"""Plots and text summaries of finished runs."""
from __future__ import annotations

import json
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from tgdm.lossmetrics import MetricReport  # noqa: E402
from tgdm.pipeline.config import RunConfig  # noqa: E402
from tgdm.pipeline.summary import format_summary, model_summary  # noqa: E402


def _read_log(path: Path) -> List[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def plot_losses(log_path, out_png) -> Path:
    rows = _read_log(Path(log_path))
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in rows]
    for key in ("total", "dice_loss", "ce_loss", "match_loss"):
        if rows and key in rows[0]:
            ax.plot(epochs, [r[key] for r in rows], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_class_scores(metrics_path, out_png) -> Path:
    rep = MetricReport.from_json(json.loads(Path(metrics_path).read_text()))
    d, n = rep.class_scores("dsc"), rep.class_scores("nsd")
    classes = sorted(d)
    fig, ax = plt.subplots(figsize=(8, 4))
    w = 0.4
    ax.bar([c - w / 2 for c in classes], [d[c] for c in classes], w, label="DSC")
    ax.bar([c + w / 2 for c in classes], [n[c] for c in classes], w, label="NSD")
    ax.set_xticks(classes)
    ax.set_xlabel("class")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def report(run_dir, out_dir=None) -> List[Path]:
    """Render every ``log.jsonl`` and ``metrics.json`` found under ``run_dir``.

    ``report.txt`` starts with the parameter and MAC counts of the run's
    configuration (when ``config.json`` is present), followed by the
    metric and ablation tables.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    made, text = [], []
    if (run_dir / "config.json").exists():
        text += ["model summary", format_summary(model_summary(RunConfig.load(run_dir / "config.json").net)), ""]
    for log in sorted(run_dir.rglob("log.jsonl")):
        tag = "_".join(log.parent.relative_to(run_dir).parts) or "run"
        made.append(plot_losses(log, out_dir / f"loss_{tag}.png"))
    for metrics in sorted(run_dir.rglob("metrics.json")):
        tag = "_".join(metrics.parent.relative_to(run_dir).parts) or "run"
        made.append(plot_class_scores(metrics, out_dir / f"classes_{tag}.png"))
        text += [MetricReport.from_json(json.loads(metrics.read_text())).table(tag), ""]
    for table in sorted(run_dir.rglob("ablation.txt")):
        if table.parent != out_dir:
            text += ["ablation", table.read_text()]
    if text:
        (out_dir / "report.txt").write_text("\n".join(text))
        made.append(out_dir / "report.txt")
    return made
