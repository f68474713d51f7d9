"""Loading cases, intensity normalization and per-stage training samples."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from tgdm.phantom import NUM_CLASSES, NUM_SEGMENTS, load_case, load_manifest
from tgdm.pipeline.config import RunConfig
from tgdm.pipeline.errors import DataError
from tgdm.topo import Centerline, TemplateAtlas, build_template, case_centerlines, sample_points, template_init
from tgdm.volgrid import (
    BoundingBox,
    EmptyForegroundError,
    GridError,
    LabelGrid,
    VolumeGrid,
    box_from_mask,
    crop_resize,
    resample_array,
)

logger = logging.getLogger(__name__)


@dataclass
class Case:
    case_id: str
    volume: VolumeGrid
    labels: Optional[LabelGrid] = None
    _centerlines: Optional[Dict[int, Centerline]] = field(default=None, repr=False)

    @property
    def centerlines(self) -> Dict[int, Centerline]:
        """Ordered skeleton centerlines of the ground-truth labels (computed once)."""
        if self._centerlines is None:
            if self.labels is None:
                raise DataError(f"case {self.case_id} has no labels")
            self._centerlines = case_centerlines(self.labels.data)
        return self._centerlines


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint case-id lists; ``fold`` names the cross-validation fold they came from."""

    train: Tuple[str, ...]
    val: Tuple[str, ...] = ()
    test: Tuple[str, ...] = ()
    ood: Tuple[str, ...] = ()
    fold: Optional[int] = None

    def __post_init__(self):
        for name in ("train", "val", "test", "ood"):
            object.__setattr__(self, name, tuple(str(c) for c in getattr(self, name)))
        seen: Dict[str, str] = {}
        for name in ("train", "val", "test", "ood"):
            for cid in getattr(self, name):
                if cid in seen:
                    raise DataError(f"case {cid} is in both {seen[cid]} and {name}")
                seen[cid] = name
        if not self.train:
            raise DataError("training split is empty")

    @classmethod
    def cross_validation(cls, ids: Sequence[str], fold: int, n_folds: int = 3, seed: int = 0, **rest) -> "SplitSpec":
        """Fold ``fold`` of a seeded ``n_folds``-way partition: that part validates, the rest trains."""
        if not 0 <= fold < n_folds:
            raise DataError(f"fold {fold} outside [0, {n_folds})")
        order = np.random.default_rng(seed).permutation(len(ids))
        parts = np.array_split(order, n_folds)
        val = [ids[i] for i in sorted(parts[fold])]
        train = [ids[i] for k, part in enumerate(parts) if k != fold for i in sorted(part)]
        return cls(tuple(train), tuple(val), fold=fold, **rest)


def case_ids(split_dir) -> List[str]:
    return [c["id"] for c in load_manifest(split_dir)["cases"]]


def load_split(split_dir, ids: Optional[Sequence[str]] = None) -> List[Case]:
    split_dir = Path(split_dir)
    try:
        ids = list(ids) if ids is not None else case_ids(split_dir)
        out = []
        for cid in ids:
            pc = load_case(split_dir, cid)
            out.append(Case(cid, pc.volume, pc.labels))
        return out
    except GridError as exc:
        raise DataError(f"cannot read case in {split_dir}: {exc}") from exc


# -- normalization and stage-1 inputs ---------------------------------------------

def normalize_intensity(data: np.ndarray, percentiles=(1.0, 99.0)) -> np.ndarray:
    """Clip to the percentile window, then z-score. A constant volume maps to zeros."""
    data = np.asarray(data, dtype=np.float64)
    lo, hi = np.percentile(data, percentiles)
    clipped = np.clip(data, lo, hi)
    std = clipped.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros(data.shape, dtype=np.float32)
    return ((clipped - clipped.mean()) / std).astype(np.float32)


def normalized_grid(volume: VolumeGrid, config: RunConfig) -> VolumeGrid:
    return VolumeGrid(normalize_intensity(volume.data, config.clip_percentiles), volume.spacing, volume.origin)


def stage1_target(labels: np.ndarray, mode: str) -> np.ndarray:
    """Binary stage-1 target at full resolution: the rasterized foreground box or the raw union."""
    fg = np.asarray(labels) > 0
    if mode == "binary" or not fg.any():
        return fg.astype(np.uint8)
    out = np.zeros(fg.shape, dtype=np.uint8)
    out[box_from_mask(fg).slices] = 1
    return out


@dataclass
class Stage1Sample:
    case_id: str
    image: np.ndarray  # stage-1 shape, float32
    target: np.ndarray  # stage-1 shape, uint8


def preprocess(case: Case, config: RunConfig) -> Stage1Sample:
    shape = config.net.stage1_shape
    norm = normalize_intensity(case.volume.data, config.clip_percentiles)
    image = resample_array(norm, shape, "trilinear").astype(np.float32)
    if case.labels is None:
        target = np.zeros(shape, np.uint8)
    else:
        target = resample_array(stage1_target(case.labels.data, config.stage1_target), shape, "nearest")
    return Stage1Sample(case.case_id, image, target.astype(np.uint8))


# -- stage-2 crops and point sets ------------------------------------------------

def gt_box(labels: LabelGrid, config: RunConfig) -> BoundingBox:
    if config.single_stage:
        return BoundingBox.full(labels.shape)
    try:
        return box_from_mask(labels.data > 0, config.margin_frac)
    except EmptyForegroundError:
        return BoundingBox.full(labels.shape)


def build_atlas(cases: Sequence[Case], config: RunConfig) -> TemplateAtlas:
    """Template from training cases only, each in its own ground-truth crop frame."""
    pairs = [(c.centerlines, gt_box(c.labels, config)) for c in cases]
    return build_template(pairs, config.m0, config.m1, segments=range(1, NUM_SEGMENTS + 1))


def point_counts(atlas: TemplateAtlas, config: RunConfig) -> Dict[int, int]:
    return atlas.point_counts(variable=config.vpn)


def init_points(atlas: TemplateAtlas, box: BoundingBox, counts: Dict[int, int]) -> List[Optional[np.ndarray]]:
    """Template points for segments 1..20 in the crop frame (None where the atlas lacks one)."""
    sets = template_init(atlas, box, counts)
    return [sets[s].points if s in sets else None for s in range(1, NUM_SEGMENTS + 1)]


def gt_points(case: Case, box: BoundingBox, counts: Dict[int, int]):
    """Ground-truth point sets with the template's counts, plus a presence mask."""
    pts, present = [], []
    for seg in range(1, NUM_SEGMENTS + 1):
        n = counts.get(seg)
        cl = case.centerlines.get(seg)
        if n is None:
            pts.append(None)
            present.append(False)
        elif cl is None:
            pts.append(np.zeros((n, 3)))
            present.append(False)
        else:
            pts.append(sample_points(cl, n, box).points)
            present.append(True)
    return pts, present


@dataclass
class Stage2Sample:
    case_id: str
    box: BoundingBox
    image: np.ndarray  # (C, *stage2_shape) float32
    labels: np.ndarray  # stage2_shape, uint8
    p_init: List[Optional[np.ndarray]]
    p_gt: List[Optional[np.ndarray]]
    present: List[bool]


def stage2_input(norm: VolumeGrid, box: BoundingBox, config: RunConfig, slow_mask: Optional[np.ndarray] = None) -> np.ndarray:
    shape = config.net.stage2_shape
    chans = [crop_resize(norm, box, shape).data]
    if config.net.slow_channel:
        if slow_mask is None:
            raise DataError("slow_channel needs the stage-1 mask")
        chans.append(resample_array(slow_mask[box.slices], shape, "nearest").astype(np.float32))
    return np.stack(chans).astype(np.float32)


def make_stage2_sample(case: Case, config: RunConfig, atlas: Optional[TemplateAtlas], box: Optional[BoundingBox] = None) -> Stage2Sample:
    box = box or gt_box(case.labels, config)
    norm = normalized_grid(case.volume, config)
    slow = stage1_target(case.labels.data, config.stage1_target) if config.net.slow_channel else None
    image = stage2_input(norm, box, config, slow)
    labels = crop_resize(case.labels, box, config.net.stage2_shape).data
    if config.net.use_tgdm:
        if atlas is None:
            raise DataError("TGDM training needs a template atlas")
        counts = point_counts(atlas, config)
        p_init = init_points(atlas, box, counts)
        p_gt, present = gt_points(case, box, counts)
    else:
        p_init, p_gt, present = [None] * NUM_SEGMENTS, [None] * NUM_SEGMENTS, [False] * NUM_SEGMENTS
    return Stage2Sample(case.case_id, box, image, labels, p_init, p_gt, present)


def collate_points(sets: Sequence[Sequence[Optional[np.ndarray]]], dtype=torch.float32) -> List[Optional[torch.Tensor]]:
    """Per-case point lists -> per-segment (B, N, 3) tensors."""
    out = []
    for seg in range(len(sets[0])):
        items = [s[seg] for s in sets]
        out.append(None if items[0] is None else torch.as_tensor(np.stack(items), dtype=dtype))
    return out


def label_grid(data: np.ndarray, like) -> LabelGrid:
    return LabelGrid(np.asarray(data, dtype=np.uint8), NUM_CLASSES, like.spacing, like.origin)
