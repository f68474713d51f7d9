"""Stage-1 and stage-2 training loops."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from tgdm.lossmetrics import dsc, stage_losses
from tgdm.net import TGDMNet, build_stage1, load_checkpoint, save_checkpoint
from tgdm.pipeline.config import RunConfig
from tgdm.pipeline.data import (
    Case,
    build_atlas,
    collate_points,
    load_split,
    make_stage2_sample,
    preprocess,
)
from tgdm.pipeline.errors import DataError, NumericalError
from tgdm.pipeline.provenance import seed_everything, write_provenance
from tgdm.topo import TemplateAtlas

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint: Path
    history: List[dict] = field(default_factory=list)
    atlas: Optional[Path] = None


class _Log:
    def __init__(self, path: Path):
        self.path = path
        self.rows: List[dict] = []
        path.write_text("")

    def __call__(self, **row):
        self.rows.append(row)
        with self.path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        logger.info(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _check_finite(loss: torch.Tensor, model, config, out_dir: Path, kind: str, epoch: int):
    if torch.isfinite(loss):
        return
    dump = save_checkpoint(out_dir / "diverged.pt", model, config.net, kind, {"epoch": epoch})
    raise NumericalError(f"non-finite loss at epoch {epoch}; state dumped to {dump}")


def _cases(cases: Optional[Sequence[Case]], config: RunConfig, split: str, optional: bool = False) -> List[Case]:
    if cases is not None:
        return list(cases)
    if optional and not (config.split_dir(split) / "manifest.json").exists():
        return []
    return load_split(config.split_dir(split))


def train_stage1(config: RunConfig, out_dir, train_cases=None, val_cases=None, seed: Optional[int] = None) -> TrainResult:
    """Fit the light U-Net on (downsampled image, box or binary target) pairs."""
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir)
    write_provenance(out_dir, config, [seed], {"stage": "stage1"})
    seed_everything(seed, config.deterministic)
    train = [preprocess(c, config) for c in _cases(train_cases, config, "train")]
    val = [preprocess(c, config) for c in _cases(val_cases, config, "val", optional=True)]
    if not train:
        raise DataError("empty training split")
    model = build_stage1(config.net)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    log = _Log(out_dir / "log.jsonl")
    for epoch in range(config.epochs_stage1):
        model.train()
        t0, totals = time.time(), []
        for idx in _batches(len(train), config.batch_size, rng):
            x = torch.from_numpy(np.stack([train[i].image for i in idx]))[:, None]
            y = torch.from_numpy(np.stack([train[i].target for i in idx])).long()
            rep = stage_losses(model(x), y)
            _check_finite(rep.total, model, config, out_dir, "stage1", epoch)
            opt.zero_grad()
            rep.total.backward()
            opt.step()
            totals.append(rep.as_dict())
        row = {k: float(np.mean([t[k] for t in totals])) for k in ("total", "dice_loss", "ce_loss")}
        log(stage="stage1", epoch=epoch, **row, val_dsc=_stage1_val_dsc(model, val), seconds=time.time() - t0)
    ckpt = save_checkpoint(out_dir / "stage1.pt", model, config.net, "stage1", {"seed": seed, "epochs": config.epochs_stage1})
    return TrainResult(ckpt, log.rows)


@torch.no_grad()
def _stage1_val_dsc(model, val) -> float:
    if not val:
        return math.nan
    model.eval()
    scores = []
    for s in val:
        pred = model(torch.from_numpy(s.image)[None, None]).argmax(1)[0].numpy()
        scores.append(dsc(pred, s.target, 1))
    return float(np.nanmean(scores))


def train_stage2(
    config: RunConfig,
    out_dir,
    stage1_checkpoint=None,
    train_cases=None,
    atlas: Optional[TemplateAtlas] = None,
    seed: Optional[int] = None,
) -> TrainResult:
    """Fit the 21-class network on cropped cases; stage 1 stays frozen.

    Crops come from ground-truth boxes unless ``train_box_source == "pred"``,
    in which case the frozen stage-1 model proposes them. With TGDM enabled the
    point sets use the atlas-derived counts for both template and ground truth.
    """
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir)
    write_provenance(out_dir, config, [seed], {"stage": "stage2", "stage1_checkpoint": str(stage1_checkpoint)})
    seed_everything(seed, config.deterministic)
    cases = _cases(train_cases, config, "train")
    if not cases:
        raise DataError("empty training split")
    atlas_path = None
    if config.net.use_tgdm:
        atlas = atlas or build_atlas(cases, config)
        atlas_path = out_dir / "atlas.json"
        atlas.save(atlas_path)
    boxes = [None] * len(cases)
    if config.train_box_source == "pred" and not config.single_stage:
        from tgdm.pipeline.infer import propose_box

        if stage1_checkpoint is None:
            raise DataError("train_box_source='pred' needs a stage-1 checkpoint")
        stage1, _, _ = load_checkpoint(stage1_checkpoint)
        for p in stage1.parameters():
            p.requires_grad_(False)
        boxes = [propose_box(stage1, c.volume, config)[0] for c in cases]
    samples = [make_stage2_sample(c, config, atlas, b) for c, b in zip(cases, boxes)]

    model = TGDMNet(config.net)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    log = _Log(out_dir / "log.jsonl")
    use_points = config.net.use_tgdm
    for epoch in range(config.epochs):
        model.train()
        t0, totals = time.time(), []
        for idx in _batches(len(samples), config.batch_size, rng):
            batch = [samples[i] for i in idx]
            x = torch.from_numpy(np.stack([s.image for s in batch]))
            y = torch.from_numpy(np.stack([s.labels for s in batch])).long()
            if use_points:
                p_init = collate_points([s.p_init for s in batch])
                p_gt = collate_points([s.p_gt for s in batch])
                present = [s.present for s in batch]
                logits, p_pred = model(x, p_init)
                rep = stage_losses(logits, y, p_pred, p_gt, present)
            else:
                logits, _ = model(x)
                rep = stage_losses(logits, y)
            _check_finite(rep.total, model, config, out_dir, "stage2", epoch)
            opt.zero_grad()
            rep.total.backward()
            opt.step()
            totals.append(rep.as_dict())
        row = {k: float(np.mean([t[k] for t in totals])) for k in ("total", "dice_loss", "ce_loss", "match_loss")}
        log(stage="stage2", epoch=epoch, **row, seconds=time.time() - t0)
    ckpt = save_checkpoint(out_dir / "stage2.pt", model, config.net, "stage2", {"seed": seed, "epochs": config.epochs})
    return TrainResult(ckpt, log.rows, atlas_path)
