"""The M0..M4 ablation harness."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from tgdm.lossmetrics import paired_test
from tgdm.pipeline.config import ABLATIONS, RunConfig, ablation_config
from tgdm.pipeline.data import load_split
from tgdm.pipeline.evaluate import evaluate_split
from tgdm.pipeline.infer import Predictor, predict_split
from tgdm.pipeline.provenance import write_provenance
from tgdm.pipeline.train import train_stage1, train_stage2
from tgdm.net import load_checkpoint
from tgdm.topo import TemplateAtlas

logger = logging.getLogger(__name__)


def switches(config: RunConfig) -> Dict[str, bool]:
    two_stage = not config.single_stage
    return {
        "DB": two_stage and config.stage1_target == "binary",
        "BB": two_stage and config.stage1_target == "box",
        "TGDM": config.net.use_tgdm,
        "VPN": config.net.use_tgdm and config.vpn,
    }


@dataclass
class AblationRow:
    name: str
    switches: Dict[str, bool]
    dsc_per_seed: List[float]
    nsd_per_seed: List[float]
    case_dsc: Dict[str, float]  # per-case DSC averaged over seeds
    p_vs_m4: Optional[float] = None

    @property
    def dsc(self):
        return float(np.mean(self.dsc_per_seed)), float(np.std(self.dsc_per_seed))

    @property
    def nsd(self):
        return float(np.mean(self.nsd_per_seed)), float(np.std(self.nsd_per_seed))


@dataclass
class AblationTable:
    rows: List[AblationRow] = field(default_factory=list)

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def to_json(self) -> dict:
        return {"rows": [{**asdict(r), "dsc": r.dsc, "nsd": r.nsd} for r in self.rows]}

    @classmethod
    def from_json(cls, d) -> "AblationTable":
        keep = {"name", "switches", "dsc_per_seed", "nsd_per_seed", "case_dsc", "p_vs_m4"}
        return cls([AblationRow(**{k: v for k, v in r.items() if k in keep}) for r in d["rows"]])

    def text(self) -> str:
        head = f"{'':<4}{'DB':>4}{'BB':>4}{'TGDM':>6}{'VPN':>5}{'DSC (%)':>14}{'NSD (%)':>14}{'p vs M4':>10}"
        lines = [head]
        for r in self.rows:
            marks = "".join(f"{('x' if r.switches[k] else ''):>{w}}" for k, w in (("DB", 4), ("BB", 4), ("TGDM", 6), ("VPN", 5)))
            (dm, ds), (nm, ns) = r.dsc, r.nsd
            p = "" if r.p_vs_m4 is None else f"{r.p_vs_m4:.3g}"
            lines.append(f"{r.name:<4}{marks}{100 * dm:>8.1f}±{100 * ds:<5.1f}{100 * nm:>8.1f}±{100 * ns:<5.1f}{p:>10}")
        return "\n".join(lines)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        (out_dir / "ablation.json").write_text(json.dumps(self.to_json(), indent=2))
        (out_dir / "ablation.txt").write_text(self.text() + "\n")


def ablation_run(
    base: RunConfig,
    out_dir,
    seeds: Optional[Sequence[int]] = None,
    names: Sequence[str] = ABLATIONS,
    split: str = "val",
) -> AblationTable:
    """Train and evaluate every ablation row for every seed on ``split``.

    Runs that are identical by construction are trained once per seed: all
    box-target rows share one stage-1 model, and with ground-truth training
    crops M1 and M2 share their stage-2 model.
    """
    out_dir = Path(out_dir)
    seeds = list(base.ablation_seeds if seeds is None else seeds)
    write_provenance(out_dir, base, seeds, {"ablation": list(names), "split": split})
    train_cases = load_split(base.split_dir("train"))
    eval_cases = load_split(base.split_dir(split))
    gt_dir = base.split_dir(split)
    stage1_runs: Dict[tuple, Path] = {}
    stage2_runs: Dict[tuple, tuple] = {}
    reports = {n: [] for n in names}
    for seed in seeds:
        for name in names:
            cfg = ablation_config(base, name)
            run_dir = out_dir / name / f"seed{seed}"
            s1 = None
            if not cfg.single_stage:
                key1 = (seed, cfg.stage1_target)
                if key1 not in stage1_runs:
                    stage1_runs[key1] = train_stage1(cfg, run_dir / "stage1", train_cases, eval_cases, seed=seed).checkpoint
                s1 = stage1_runs[key1]
            key2 = (seed, cfg.single_stage, cfg.net.use_tgdm, cfg.vpn, s1 if cfg.train_box_source == "pred" else None)
            if key2 not in stage2_runs:
                res = train_stage2(cfg, run_dir / "stage2", s1, train_cases, seed=seed)
                stage2_runs[key2] = (res.checkpoint, res.atlas)
            s2, atlas_path = stage2_runs[key2]
            predictor = Predictor(
                cfg,
                load_checkpoint(s2)[0],
                load_checkpoint(s1)[0] if s1 else None,
                TemplateAtlas.load(atlas_path) if atlas_path else None,
            )
            pred_dir = predict_split(predictor, gt_dir, run_dir / "pred", eval_cases)
            rep = evaluate_split(pred_dir, gt_dir, cfg.tau_mm, out=run_dir, name=name)
            reports[name].append(rep)
            logger.info("%s seed %d: DSC %.4f NSD %.4f", name, seed, rep.aggregate("dsc")[0], rep.aggregate("nsd")[0])
    table = AblationTable()
    for name in names:
        per_case = [r.case_scores("dsc") for r in reports[name]]
        ids = sorted(per_case[0])
        table.rows.append(
            AblationRow(
                name,
                switches(ablation_config(base, name)),
                [r.aggregate("dsc")[0] for r in reports[name]],
                [r.aggregate("nsd")[0] for r in reports[name]],
                {c: float(np.nanmean([pc[c] for pc in per_case])) for c in ids},
            )
        )
    if "M4" in names:
        ref = table.row("M4").case_dsc
        ids = sorted(ref)
        for r in table.rows:
            if r.name != "M4" and len(ids) >= 5:
                r.p_vs_m4 = paired_test([r.case_dsc[c] for c in ids], [ref[c] for c in ids])
    table.save(out_dir)
    return table
