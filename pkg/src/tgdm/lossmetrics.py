"""Training losses and evaluation metrics.

Losses operate on torch tensors and stay differentiable. Metrics operate on
label arrays (or LabelGrids) with numpy/scipy and return plain floats; a class
absent from both prediction and ground truth scores NaN and is skipped when
averaging.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from tgdm.volgrid import LabelGrid

DICE_EPS = 1e-5
DEFAULT_TAU_MM = 1.0
_SIX = ndimage.generate_binary_structure(3, 1)


# -- losses -------------------------------------------------------------------

def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS):
    """Soft Dice over foreground classes and voxel-mean cross-entropy.

    ``logits`` is (B, K, *spatial); ``target`` is (B, *spatial) integer labels.
    """
    if logits.dim() < 3 or target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)}, target {tuple(target.shape)}")
    k = logits.shape[1]
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target labels outside [0, {k})")
    ce = F.cross_entropy(logits, target)
    prob = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, k).movedim(-1, 1).to(prob.dtype)
    dims = (0,) + tuple(range(2, logits.dim()))
    inter = (prob * onehot).sum(dims)[1:]
    denom = prob.sum(dims)[1:] + onehot.sum(dims)[1:]
    dice = 1 - ((2 * inter + eps) / (denom + eps)).mean()
    return dice, ce


def _segment_match(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    cost = torch.cdist(pred, gt)
    rows, cols = linear_sum_assignment(cost.detach().cpu().numpy())
    return cost[torch.as_tensor(rows), torch.as_tensor(cols)].sum()


def match_loss(p_pred: Sequence[Optional[torch.Tensor]], p_gt: Sequence[Optional[torch.Tensor]], gt_present=None):
    """Optimal-assignment point matching, summed over segments, mean over batch.

    Point sets are (B, N_v, 3) per segment (or None when absent). ``gt_present``
    optionally masks (B, S) which cases actually contain each segment.
    Returns (total, per_segment) where per_segment holds batch-mean costs.
    """
    if len(p_pred) != len(p_gt):
        raise ValueError("p_pred and p_gt list different numbers of segments")
    per_segment: List[torch.Tensor] = []
    ref = next((p for p in p_pred if p is not None), None)
    zero = torch.zeros((), dtype=ref.dtype if ref is not None else torch.float32)
    for s, (pp, pg) in enumerate(zip(p_pred, p_gt)):
        if pp is None or pg is None:
            per_segment.append(zero)
            continue
        if pp.shape != pg.shape:
            raise ValueError(f"segment {s + 1}: point counts differ ({tuple(pp.shape)} vs {tuple(pg.shape)})")
        costs = []
        for b in range(pp.shape[0]):
            if gt_present is not None and not bool(gt_present[b][s]):
                costs.append(zero)
            else:
                costs.append(_segment_match(pp[b], pg[b].to(pp.dtype)))
        per_segment.append(torch.stack(costs).mean())
    total = torch.stack(per_segment).sum() if per_segment else zero
    return total, per_segment


@dataclass
class LossReport:
    dice_loss: torch.Tensor
    ce_loss: torch.Tensor
    match_loss: torch.Tensor
    total: torch.Tensor
    per_segment: List[float] = field(default_factory=list)

    @property
    def seg_loss(self) -> torch.Tensor:
        return self.dice_loss + self.ce_loss

    def as_dict(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("dice_loss", "ce_loss", "match_loss", "total")}


def stage_losses(logits, target, p_pred=None, p_gt=None, gt_present=None) -> LossReport:
    """Dice + CE, plus the point-matching term when point sets are given."""
    dice, ce = dice_ce_loss(logits, target)
    if p_pred is None:
        match, per_seg = torch.zeros((), dtype=dice.dtype), []
    else:
        match, per_seg = match_loss(p_pred, p_gt, gt_present)
    return LossReport(dice, ce, match, (dice + ce) + match, [float(c.detach()) for c in per_seg])


# -- metrics ------------------------------------------------------------------

def _arrays(pred, gt, spacing):
    if isinstance(pred, LabelGrid) or isinstance(gt, LabelGrid):
        if not (isinstance(pred, LabelGrid) and isinstance(gt, LabelGrid)):
            raise ValueError("pass two LabelGrids or two arrays")
        if not np.allclose(pred.spacing, gt.spacing):
            raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
        spacing = pred.spacing
        pred, gt = pred.data, gt.data
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt, tuple(float(s) for s in (spacing or (1.0,) * pred.ndim))


def dsc(pred, gt, k: int) -> float:
    pred, gt, _ = _arrays(pred, gt, None)
    p, g = pred == k, gt == k
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return math.nan
    return 2.0 * int((p & g).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a 6-neighbour outside the mask (or the grid)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def _dist_to(border: np.ndarray, spacing) -> np.ndarray:
    if not border.any():
        return np.full(border.shape, np.inf)
    return ndimage.distance_transform_edt(~border, sampling=spacing)


def nsd(pred, gt, k: int, tau: float = DEFAULT_TAU_MM, spacing=None) -> float:
    pred, gt, spacing = _arrays(pred, gt, spacing)
    bp, bg = surface(pred == k), surface(gt == k)
    n = int(bp.sum()) + int(bg.sum())
    if n == 0:
        return math.nan
    hit_p = int((_dist_to(bg, spacing)[bp] <= tau).sum())
    hit_g = int((_dist_to(bp, spacing)[bg] <= tau).sum())
    return (hit_p + hit_g) / n


def _mean_std(values):
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


@dataclass
class MetricReport:
    """Per-case, per-class scores. Case score = mean over scored classes."""

    dsc: Dict[str, Dict[int, float]]
    nsd: Dict[str, Dict[int, float]]
    tau: float = DEFAULT_TAU_MM
    p_values: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def compute(cls, pairs: Mapping[str, tuple], classes: Sequence[int], tau: float = DEFAULT_TAU_MM):
        """``pairs`` maps case id to (pred, gt) LabelGrids or arrays."""
        d, s = {}, {}
        for cid, (pred, gt) in pairs.items():
            d[cid] = {k: dsc(pred, gt, k) for k in classes}
            s[cid] = {k: nsd(pred, gt, k, tau) for k in classes}
        return cls(d, s, tau)

    def case_scores(self, metric: str) -> Dict[str, float]:
        table = getattr(self, metric)
        return {cid: _mean_std(v.values())[0] for cid, v in table.items()}

    def class_scores(self, metric: str) -> Dict[int, float]:
        table = getattr(self, metric)
        classes = sorted({k for v in table.values() for k in v})
        return {k: _mean_std([v.get(k, math.nan) for v in table.values()])[0] for k in classes}

    def aggregate(self, metric: str):
        return _mean_std(self.case_scores(metric).values())

    def to_json(self) -> dict:
        def clean(x):
            return None if math.isnan(x) else x

        return {
            "tau_mm": self.tau,
            "dsc": {c: {str(k): clean(v) for k, v in row.items()} for c, row in self.dsc.items()},
            "nsd": {c: {str(k): clean(v) for k, v in row.items()} for c, row in self.nsd.items()},
            "summary": {m: dict(zip(("mean", "std"), self.aggregate(m))) for m in ("dsc", "nsd")},
            "p_values": self.p_values,
        }

    @classmethod
    def from_json(cls, d) -> "MetricReport":
        def load(t):
            return {c: {int(k): (math.nan if v is None else v) for k, v in row.items()} for c, row in t.items()}

        return cls(load(d["dsc"]), load(d["nsd"]), d["tau_mm"], d.get("p_values", {}))

    def table(self, name: str = "") -> str:
        (dm, ds), (nm, ns) = self.aggregate("dsc"), self.aggregate("nsd")
        head = f"{'method':<16}{'DSC (%)':>14}{'NSD (%)':>14}"
        row = f"{name:<16}{100 * dm:>8.1f}±{100 * ds:<5.1f}{100 * nm:>8.1f}±{100 * ns:<5.1f}"
        lines = [head, row]
        lines += [f"  p vs {other}: {p:.4g}" for other, p in self.p_values.items()]
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


# -- significance ---------------------------------------------------------------

EXACT_MAX_N = 20


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def paired_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value; zero differences are dropped.

    Exact null distribution (by dynamic programming over doubled midranks) for
    up to 20 nonzero differences, tie-corrected normal approximation with
    continuity correction above that.
    """
    a, b = np.asarray(scores_a, dtype=float), np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score lists must be 1-d and of equal length")
    if len(a) < 5:
        raise ValueError("paired test needs at least 5 cases")
    d = b - a
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    ranks = _midranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    if n <= EXACT_MAX_N:
        r2 = np.rint(2 * ranks).astype(int)
        counts = np.zeros(r2.sum() + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in r2:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[:-r]
            counts += shifted
        counts /= counts.sum()
        w2 = int(round(2 * w_plus))
        lower, upper = counts[: w2 + 1].sum(), counts[w2:].sum()
        return float(min(1.0, 2 * min(lower, upper)))
    mean = n * (n + 1) / 4
    sd = math.sqrt((ranks**2).sum() / 4)
    z = (abs(w_plus - mean) - 0.5) / sd
    return float(min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2))))
