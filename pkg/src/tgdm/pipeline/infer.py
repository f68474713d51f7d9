"""Two-stage inference: box proposal, cropped segmentation, paste-back."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from tgdm.net import load_checkpoint
from tgdm.phantom import NUM_CLASSES
from tgdm.pipeline.config import RunConfig
from tgdm.pipeline.data import (
    collate_points,
    init_points,
    load_split,
    normalize_intensity,
    normalized_grid,
    point_counts,
    stage2_input,
)
from tgdm.pipeline.errors import DataError
from tgdm.topo import TemplateAtlas
from tgdm.volgrid import BoundingBox, LabelGrid, VolumeGrid, box_from_mask, paste_back, resample_array, scale_box, write_grid

logger = logging.getLogger(__name__)


@torch.no_grad()
def stage1_mask(stage1: nn.Module, volume: VolumeGrid, config: RunConfig) -> np.ndarray:
    norm = normalize_intensity(volume.data, config.clip_percentiles)
    x = resample_array(norm, config.net.stage1_shape, "trilinear").astype(np.float32)
    stage1.eval()
    return stage1(torch.from_numpy(x)[None, None]).argmax(1)[0].numpy().astype(np.uint8)


def propose_box(stage1: nn.Module, volume: VolumeGrid, config: RunConfig) -> Tuple[BoundingBox, np.ndarray]:
    """Full-resolution crop box from the stage-1 mask, plus that mask at full resolution.

    An empty stage-1 mask falls back to the whole volume.
    """
    mask = stage1_mask(stage1, volume, config)
    full_mask = resample_array(mask, volume.shape, "nearest")
    if not mask.any():
        logger.warning("stage-1 mask is empty; using the full volume as crop box")
        return BoundingBox.full(volume.shape), full_mask
    box = box_from_mask(mask, config.margin_frac)
    return scale_box(box, config.net.stage1_shape, volume.shape), full_mask


@dataclass
class Predictor:
    config: RunConfig
    stage2: nn.Module
    stage1: Optional[nn.Module] = None
    atlas: Optional[TemplateAtlas] = None

    def __post_init__(self):
        self.stage2.eval()
        if self.stage1 is not None:
            self.stage1.eval()
        if not self.config.single_stage and self.stage1 is None:
            raise DataError("two-stage inference needs a stage-1 model")
        if self.config.net.use_tgdm and self.atlas is None:
            raise DataError("TGDM inference needs a template atlas")

    @classmethod
    def from_files(cls, config: RunConfig, stage2_ckpt, stage1_ckpt=None, atlas_path=None) -> "Predictor":
        stage2, net_cfg, _ = load_checkpoint(stage2_ckpt)
        stage1 = load_checkpoint(stage1_ckpt)[0] if stage1_ckpt else None
        atlas = TemplateAtlas.load(atlas_path) if atlas_path else None
        return cls(config.with_(net=net_cfg), stage2, stage1, atlas)

    @torch.no_grad()
    def predict(self, volume: VolumeGrid) -> Tuple[LabelGrid, Dict]:
        cfg = self.config
        if cfg.single_stage:
            box, slow = BoundingBox.full(volume.shape), None
        else:
            box, slow = propose_box(self.stage1, volume, cfg)
        x = torch.from_numpy(stage2_input(normalized_grid(volume, cfg), box, cfg, slow))[None]
        if cfg.net.use_tgdm:
            p_init = collate_points([init_points(self.atlas, box, point_counts(self.atlas, cfg))])
            logits, p_pred = self.stage2(x, p_init)
        else:
            logits, p_pred = self.stage2(x)
        crop = LabelGrid(logits.argmax(1)[0].numpy().astype(np.uint8), NUM_CLASSES)
        pred = paste_back(crop, box, volume.shape, volume.spacing, volume.origin)
        if not pred.data.any():
            logger.warning("prediction is background only")
        return pred, {"box": box.to_json(), "p_pred": p_pred}


def infer_case(volume: VolumeGrid, stage1_ckpt, stage2_ckpt, config: RunConfig, atlas_path=None) -> LabelGrid:
    return Predictor.from_files(config, stage2_ckpt, stage1_ckpt, atlas_path).predict(volume)[0]


def predict_split(predictor: Predictor, split_dir, out_dir, cases=None) -> Path:
    """Write ``case_<id>.lab`` predictions for every case of a split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for case in cases if cases is not None else load_split(split_dir):
        pred, _ = predictor.predict(case.volume)
        write_grid(out_dir / f"case_{case.case_id}.lab", pred)
    return out_dir
