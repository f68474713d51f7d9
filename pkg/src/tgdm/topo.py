"""Centerline priors: skeletons, ordered centerlines, point counts and the template atlas."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from ._thinning import thin
from .volgrid import BoundingBox

logger = logging.getLogger(__name__)

DEFAULT_M0 = 8
DEFAULT_M1 = 32
ATLAS_RESOLUTION = 64
PRUNE_LENGTH = 3

_OFFSETS = np.array(
    [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dz, dy, dx) != (0, 0, 0)]
)


class TopologyError(ValueError):
    pass


@dataclass
class Centerline:
    segment_id: int
    voxels: np.ndarray  # (n, 3) ordered voxel coordinates

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels).reshape(-1, 3)
        if len(self.voxels) == 0:
            raise TopologyError("centerline needs at least one voxel")

    @property
    def arc_length(self) -> float:
        return polyline_length(self.voxels)

    def reversed(self) -> "Centerline":
        return Centerline(self.segment_id, self.voxels[::-1].copy())


@dataclass
class PointSet:
    segment_id: int
    points: np.ndarray  # (n_v, 3) normalized (z, y, x)
    role: str = "init"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


def polyline_length(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


# ----------------------------------------------------------------------------
# skeletons


def largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=np.ones((3, 3, 3), bool))
    if n <= 1:
        return lab > 0
    sizes = np.bincount(lab.ravel())[1:]
    logger.info("mask has %d components; keeping the largest (%d voxels)", n, sizes.max())
    return lab == (int(np.argmax(sizes)) + 1)


def skeletonize_3d(mask: np.ndarray) -> np.ndarray:
    """Thin a binary mask to a one-voxel-wide, 26-connected curve skeleton."""
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise TopologyError("cannot skeletonize an empty mask")
    return thin(largest_component(mask))


def _graph(coords: np.ndarray):
    index = {tuple(c): i for i, c in enumerate(coords)}
    rows, cols, weights = [], [], []
    for i, c in enumerate(coords):
        for off in _OFFSETS:
            j = index.get(tuple(c + off))
            if j is not None:
                rows.append(i)
                cols.append(j)
                weights.append(math.sqrt(float((off * off).sum())))
    n = len(coords)
    adj = coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    neighbours = [[] for _ in range(n)]
    for r, c in zip(rows, cols):
        neighbours[r].append(c)
    return adj, neighbours


def _prune(coords: np.ndarray, prune_length: int) -> np.ndarray:
    """Drop terminal side branches shorter than ``prune_length`` voxels.

    At each junction the longest terminal branch is always kept so pruning never
    shortens the skeleton's overall extent.
    """
    _, nbrs = _graph(coords)
    degree = np.array([len(n) for n in nbrs])
    branches: Dict[int, List[List[int]]] = {}
    for end in np.flatnonzero(degree == 1):
        path, prev, cur = [int(end)], -1, int(end)
        while True:
            nxt = [j for j in nbrs[cur] if j != prev and j not in path]
            if len(nxt) != 1 or degree[nxt[0]] >= 3:
                junction = nxt[0] if len(nxt) == 1 else None
                break
            prev, cur = cur, nxt[0]
            path.append(cur)
        if junction is not None:
            branches.setdefault(junction, []).append(path)
    drop = set()
    for paths in branches.values():
        paths = sorted(paths, key=len, reverse=True)
        for p in paths[1:]:
            if len(p) < prune_length:
                drop.update(p)
    if not drop:
        return coords
    keep = [i for i in range(len(coords)) if i not in drop]
    return coords[keep]


def order_centerline(skeleton, segment_id: int = 0, prune_length: int = PRUNE_LENGTH) -> Centerline:
    """Order skeleton voxels along the longest endpoint-to-endpoint geodesic."""
    skeleton = np.asarray(skeleton)
    coords = np.argwhere(skeleton) if skeleton.ndim == 3 else skeleton.reshape(-1, 3).astype(np.int64)
    if len(coords) == 0:
        raise TopologyError("empty skeleton")
    coords = coords[np.lexsort(coords.T[::-1])]
    if len(coords) == 1:
        return Centerline(segment_id, coords)
    for _ in range(4):
        pruned = _prune(coords, prune_length)
        if len(pruned) == len(coords):
            break
        coords = pruned
    adj, nbrs = _graph(coords)
    degree = np.array([len(n) for n in nbrs])
    ends = np.flatnonzero(degree == 1)
    if len(ends) >= 2:
        dist, pred = dijkstra(adj, directed=False, indices=ends, return_predecessors=True)
        sub = dist[:, ends]
        sub[~np.isfinite(sub)] = -1
        a, b = np.unravel_index(int(np.argmax(sub)), sub.shape)
        src, dst, row = ends[a], ends[b], a
    else:
        logger.warning("segment %s skeleton has no endpoints; using farthest-pair sweep", segment_id)
        d0 = dijkstra(adj, directed=False, indices=0)
        d0[~np.isfinite(d0)] = -1
        src = int(np.argmax(d0))
        dist, pred = dijkstra(adj, directed=False, indices=[src], return_predecessors=True)
        d1 = dist[0].copy()
        d1[~np.isfinite(d1)] = -1
        dst, row = int(np.argmax(d1)), 0
    path = [int(dst)]
    while path[-1] != src:
        p = pred[row, path[-1]]
        if p < 0:
            raise TopologyError("skeleton is not connected")
        path.append(int(p))
    path = coords[path[::-1]]
    if tuple(path[-1]) < tuple(path[0]):
        path = path[::-1]
    return Centerline(segment_id, path)


def orient_lateral_first(points: np.ndarray, mid_x: float) -> np.ndarray:
    """Flip ``points`` so the end farther from the sagittal midline comes first."""
    if abs(points[-1, 2] - mid_x) > abs(points[0, 2] - mid_x):
        return points[::-1].copy()
    return points


def case_centerlines(labels: np.ndarray, segments: Optional[Iterable[int]] = None) -> Dict[int, Centerline]:
    """Skeletonize and order every present class of a label volume."""
    labels = np.asarray(labels)
    if segments is None:
        segments = [int(s) for s in np.unique(labels) if s > 0]
    out = {}
    mid_x = (labels.shape[2] - 1) / 2.0
    for seg in segments:
        mask = labels == seg
        if not mask.any():
            continue
        idx = np.argwhere(mask)
        lo = np.maximum(idx.min(0) - 1, 0)
        hi = idx.max(0) + 2
        sub = mask[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        cl = order_centerline(skeletonize_3d(sub), seg)
        out[seg] = Centerline(seg, orient_lateral_first(cl.voxels + lo, mid_x))
    return out


# ----------------------------------------------------------------------------
# point counts and sampling


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def assign_point_counts(
    lengths: Mapping[int, float],
    m0: int = DEFAULT_M0,
    m1: int = DEFAULT_M1,
    length_range: Optional[Tuple[float, float]] = None,
) -> Dict[int, int]:
    """Length-proportional point counts: shortest segment gets ``m0``, longest ``m1``.

    ``length_range`` overrides the per-call (L_min, L_max) with dataset-wide values.
    """
    if m0 < 2 or m1 < m0:
        raise TopologyError(f"need 2 <= M0 <= M1, got M0={m0}, M1={m1}")
    present = {int(k): float(v) for k, v in lengths.items() if v is not None}
    if not present:
        raise TopologyError("no segments present")
    if length_range is None:
        l_min, l_max = min(present.values()), max(present.values())
    else:
        l_min, l_max = map(float, length_range)
    counts = {}
    for seg, length in present.items():
        frac = 0.0 if l_max == l_min else (length - l_min) / (l_max - l_min)
        counts[seg] = min(max(round_half_up(m0 + frac * (m1 - m0)), m0), m1)
    return counts


def fixed_point_counts(segments: Iterable[int], m0: int = DEFAULT_M0, m1: int = DEFAULT_M1) -> Dict[int, int]:
    n = round_half_up((m0 + m1) / 2.0)
    return {int(s): n for s in segments}


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """``n`` points at equal arc-length fractions k/(n-1) along ``points``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if n < 1:
        raise TopologyError("need at least one sample")
    if len(points) == 1:
        return np.repeat(points, n, axis=0)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(points[:1], n, axis=0)
    target = np.linspace(0.0, s[-1], n) if n > 1 else np.zeros(1)
    out = np.stack([np.interp(target, s, points[:, a]) for a in range(3)], axis=1)
    out[0], out[-1] = points[0], points[-1]
    return out


def normalize_points(points: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Voxel coordinates -> [0, 1]^3, first box voxel at 0 and last at 1."""
    lo = np.asarray(box.lo, dtype=np.float64)
    extent = np.maximum(np.asarray(box.size, dtype=np.float64) - 1.0, 1.0)
    return np.clip((np.asarray(points, dtype=np.float64) - lo) / extent, 0.0, 1.0)


def denormalize_points(points: np.ndarray, box: BoundingBox) -> np.ndarray:
    lo = np.asarray(box.lo, dtype=np.float64)
    extent = np.maximum(np.asarray(box.size, dtype=np.float64) - 1.0, 1.0)
    return np.asarray(points, dtype=np.float64) * extent + lo


def sample_points(centerline: Centerline, n_v: int, crop_box: BoundingBox, role: str = "gt") -> PointSet:
    if n_v < 2:
        raise TopologyError(f"N_v must be >= 2, got {n_v}")
    pts = resample_polyline(centerline.voxels, n_v)
    return PointSet(centerline.segment_id, normalize_points(pts, crop_box), role)


# ----------------------------------------------------------------------------
# template atlas


@dataclass
class TemplateAtlas:
    polylines: Dict[int, np.ndarray] = field(default_factory=dict)  # normalized (R, 3)
    mean_lengths: Dict[int, float] = field(default_factory=dict)
    extent: Tuple[float, float, float] = (1.0, 1.0, 1.0)  # mean box extent (voxels)
    m0: int = DEFAULT_M0
    m1: int = DEFAULT_M1
    n_cases: int = 0
    absent: List[int] = field(default_factory=list)

    @property
    def segments(self) -> List[int]:
        return sorted(self.polylines)

    @property
    def length_range(self) -> Tuple[float, float]:
        vals = list(self.mean_lengths.values())
        return min(vals), max(vals)

    def point_counts(self, variable: bool = True) -> Dict[int, int]:
        if variable:
            return assign_point_counts(self.mean_lengths, self.m0, self.m1)
        return fixed_point_counts(self.segments, self.m0, self.m1)

    def to_json(self) -> dict:
        l_min, l_max = self.length_range if self.mean_lengths else (None, None)
        return {
            "M0": self.m0,
            "M1": self.m1,
            "L_min": l_min,
            "L_max": l_max,
            "extent": list(self.extent),
            "n_cases": self.n_cases,
            "absent": sorted(self.absent),
            "segments": {
                str(s): {"polyline": self.polylines[s].tolist(), "mean_length": self.mean_lengths[s]}
                for s in self.segments
            },
        }

    @classmethod
    def from_json(cls, d: dict) -> "TemplateAtlas":
        segs = d["segments"]
        return cls(
            polylines={int(k): np.asarray(v["polyline"], dtype=np.float64) for k, v in segs.items()},
            mean_lengths={int(k): float(v["mean_length"]) for k, v in segs.items()},
            extent=tuple(d.get("extent", (1.0, 1.0, 1.0))),
            m0=int(d["M0"]),
            m1=int(d["M1"]),
            n_cases=int(d.get("n_cases", 0)),
            absent=list(d.get("absent", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "TemplateAtlas":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_template(
    cases: Sequence[Tuple[Mapping[int, Centerline], BoundingBox]],
    m0: int = DEFAULT_M0,
    m1: int = DEFAULT_M1,
    segments: Iterable[int] = range(1, 21),
    resolution: int = ATLAS_RESOLUTION,
) -> TemplateAtlas:
    """Average each segment's normalized centerline over the training cases.

    ``cases`` pairs each training case's centerlines (voxel coordinates, already
    oriented consistently) with the box defining its normalized frame.
    """
    if not cases:
        raise TopologyError("atlas needs at least one training case")
    extents = np.array([np.maximum(np.array(box.size, float) - 1.0, 1.0) for _, box in cases])
    atlas = TemplateAtlas(extent=tuple(extents.mean(0)), m0=m0, m1=m1, n_cases=len(cases))
    for seg in segments:
        lines, lengths = [], []
        for centerlines, box in cases:
            cl = centerlines.get(seg)
            if cl is None:
                continue
            lines.append(normalize_points(resample_polyline(cl.voxels, resolution), box))
            lengths.append(cl.arc_length)
        if not lines:
            atlas.absent.append(seg)
            continue
        atlas.polylines[seg] = np.mean(lines, axis=0)
        atlas.mean_lengths[seg] = float(np.mean(lengths))
    if not atlas.polylines:
        raise TopologyError("no segment present in any training case")
    return atlas


def template_init(
    atlas: TemplateAtlas,
    crop_box: Optional[BoundingBox] = None,
    counts: Optional[Mapping[int, int]] = None,
) -> Dict[int, PointSet]:
    """Initial point sets in normalized crop coordinates, one per atlas segment.

    Points are spread evenly along the atlas polyline measured in the mean box
    metric (or ``crop_box``'s, when given).
    """
    counts = dict(counts) if counts is not None else atlas.point_counts()
    if crop_box is not None:
        extent = np.maximum(np.asarray(crop_box.size, float) - 1.0, 1.0)
    else:
        extent = np.asarray(atlas.extent, float)
    out = {}
    for seg in atlas.segments:
        if seg not in counts:
            continue
        pts = resample_polyline(atlas.polylines[seg] * extent, counts[seg]) / extent
        out[seg] = PointSet(seg, np.clip(pts, 0.0, 1.0), "init")
    return out
