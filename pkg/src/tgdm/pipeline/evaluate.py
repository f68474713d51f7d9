"""Scoring a directory of predictions against ground truth."""
from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import List, Optional, Sequence

from tgdm.lossmetrics import DEFAULT_TAU_MM, MetricReport, paired_test
from tgdm.phantom import NUM_SEGMENTS
from tgdm.pipeline.errors import DataError
from tgdm.volgrid import GridError, read_grid

logger = logging.getLogger(__name__)

_LABEL_FILE = re.compile(r"^case_(.+)\.lab\.vgf\.json$")


def label_ids(directory) -> List[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return sorted(m.group(1) for p in directory.iterdir() if (m := _LABEL_FILE.match(p.name)))


def _read(directory: Path, cid: str):
    try:
        return read_grid(directory / f"case_{cid}.lab")
    except GridError as exc:
        raise DataError(str(exc)) from exc


def evaluate_split(
    pred_dir,
    gt_dir,
    tau: float = DEFAULT_TAU_MM,
    compare_dir=None,
    classes: Sequence[int] = range(1, NUM_SEGMENTS + 1),
    out: Optional[Path] = None,
    name: str = "",
) -> MetricReport:
    """Per-case, per-class DSC/NSD; optionally a paired test against ``compare_dir``."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    ids = label_ids(gt_dir)
    if not ids:
        raise DataError(f"no label files in {gt_dir}")
    missing = sorted(set(ids) - set(label_ids(pred_dir)))
    if missing:
        raise DataError(f"predictions missing for cases {missing}")
    pairs = {cid: (_read(pred_dir, cid), _read(gt_dir, cid)) for cid in ids}
    report = MetricReport.compute(pairs, list(classes), tau)
    if compare_dir is not None:
        other = evaluate_split(compare_dir, gt_dir, tau, classes=classes)
        a = other.case_scores("dsc")
        b = report.case_scores("dsc")
        report.p_values[str(compare_dir)] = paired_test([a[c] for c in ids], [b[c] for c in ids])
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "metrics.json")
        (out / "metrics.txt").write_text(report.table(name or pred_dir.name) + "\n")
    return report
