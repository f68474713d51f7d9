"""Synthetic costal-cartilage phantoms.

Each case holds twenty curved, tapering tubes (ten per side, class ids 1-10 on
the left and 11-20 on the right) over a noisy soft-tissue background with a few
organ-like blobs of near-cartilage intensity, bright rib stubs and a sternum.
All randomness is drawn from a generator seeded by ``(profile.rng_seed, case_seed)``.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .volgrid import LabelGrid, VolumeGrid, read_grid, write_grid

logger = logging.getLogger(__name__)

NUM_SEGMENTS = 20
NUM_CLASSES = NUM_SEGMENTS + 1
SPLITS = ("train", "val", "test", "ood")

# normalized (z, y, x) layout of the tube axes; z grows inferiorly, y posteriorly
_RIB_Z0, _RIB_DZ = 0.14, 0.078
_STERNUM_Z0, _STERNUM_DZ = 0.12, 0.062
_TAPER = 0.7


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomProfile:
    grid_shape: Tuple[int, int, int] = (96, 96, 96)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    tube_count_per_side: int = 10
    jitter_mm: float = 1.0
    radius_range: Tuple[float, float] = (2.5, 3.5)
    fg_mean: float = 100.0
    bg_mean: float = 40.0
    noise_sigma: float = 30.0
    organ_fraction: float = 0.7  # organ intensity as a fraction of the way from bg to fg
    bone_mean: float = 250.0
    calcification_prob: float = 0.02
    calcification_boost: float = 120.0
    harvested_segments: FrozenSet[int] = frozenset()
    pose_scale: float = 0.06
    pose_shift: float = 0.04
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        object.__setattr__(self, "harvested_segments", frozenset(int(s) for s in self.harvested_segments))
        if self.tube_count_per_side != 10:
            raise PhantomError("tube_count_per_side is fixed at 10")
        if self.noise_sigma <= 0 or min(self.spacing) <= 0:
            raise PhantomError("noise_sigma and spacing must be positive")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise PhantomError(f"invalid radius range {self.radius_range}")
        bad = [s for s in self.harvested_segments if not 1 <= s <= NUM_SEGMENTS]
        if bad:
            raise PhantomError(f"harvested segment ids out of range: {bad}")

    @property
    def contrast(self) -> float:
        return self.fg_mean - self.bg_mean

    @property
    def contrast_to_noise(self) -> float:
        return abs(self.contrast) / self.noise_sigma

    def to_json(self) -> dict:
        d = asdict(self)
        d["harvested_segments"] = sorted(self.harvested_segments)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PhantomProfile":
        d = dict(d)
        d["harvested_segments"] = frozenset(d.get("harvested_segments", ()))
        for key in ("grid_shape", "spacing", "radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def ood_profile(
    profile: PhantomProfile,
    spacing_factor: float = 1.25,
    contrast_factor: float = 0.75,
    noise_factor: float = 1.25,
) -> PhantomProfile:
    """Profile emulating an external scanner: coarser spacing, lower contrast, more noise."""
    return replace(
        profile,
        spacing=tuple(s * spacing_factor for s in profile.spacing),
        fg_mean=profile.bg_mean + profile.contrast * contrast_factor,
        noise_sigma=profile.noise_sigma * noise_factor,
    )


@dataclass
class PhantomCase:
    volume: VolumeGrid
    labels: LabelGrid
    gt_centerlines: Dict[int, np.ndarray] = field(default_factory=dict)
    radii: Dict[int, float] = field(default_factory=dict)

    @property
    def present_segments(self) -> List[int]:
        return sorted(self.gt_centerlines)


def segment_side(segment_id: int) -> int:
    """+1 for left (ids 1-10), -1 for right (ids 11-20)."""
    return 1 if segment_id <= 10 else -1


def _control_points(index: int, side: int) -> np.ndarray:
    """Normalized Bezier control points for tube ``index`` (0 = most cranial)."""
    i = float(index)
    rib = np.array([_RIB_Z0 + _RIB_DZ * i, 0.38 + 0.012 * i, 0.5 + side * (0.13 + 0.029 * i)])
    sternal = np.array([_STERNUM_Z0 + _STERNUM_DZ * i, 0.27, 0.5 + side * 0.055])
    d = sternal - rib
    bow = np.array([0.012 * i / 9.0, -0.035, 0.0])
    return np.stack([rib, rib + d / 3 + bow, rib + 2 * d / 3 + bow, sternal])


def bezier(ctrl: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)[:, None]
    s = 1.0 - t
    return s**3 * ctrl[0] + 3 * s**2 * t * ctrl[1] + 3 * s * t**2 * ctrl[2] + t**3 * ctrl[3]


def _sample_axis(ctrl: np.ndarray, step: float = 0.25) -> Tuple[np.ndarray, np.ndarray]:
    """Points along the curve roughly ``step`` voxels apart, with their curve parameters."""
    coarse = bezier(ctrl, np.linspace(0, 1, 257))
    length = np.linalg.norm(np.diff(coarse, axis=0), axis=1).sum()
    n = max(int(np.ceil(length / step)) + 1, 2)
    t = np.linspace(0.0, 1.0, n)
    return bezier(ctrl, t), t


def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _check_grid(profile: PhantomProfile):
    n = min(profile.grid_shape)
    gap = _STERNUM_DZ * (profile.grid_shape[0] - 1)
    if n < 16 or gap < 2 * _TAPER * profile.radius_range[1]:
        raise PhantomError(
            f"grid {profile.grid_shape} too small for tube radii {profile.radius_range}"
        )


def generate_case(profile: PhantomProfile, case_seed: int) -> PhantomCase:
    _check_grid(profile)
    rng = np.random.default_rng([int(profile.rng_seed), int(case_seed)])
    shape = profile.grid_shape
    extent = np.array(shape, dtype=np.float64) - 1.0
    jitter_vox = profile.jitter_mm / np.array(profile.spacing)

    # per-case pose: anisotropic scale about the centre plus a shift
    scale = 1.0 + rng.uniform(-profile.pose_scale, profile.pose_scale, size=3)
    shift = rng.uniform(-profile.pose_shift, profile.pose_shift, size=3)

    def to_voxels(p):
        return ((p - 0.5) * scale + 0.5 + shift) * extent

    volume = np.full(shape, profile.bg_mean, dtype=np.float64)

    # organ-like blobs abutting the lower cartilages at near-foreground intensity
    organ_mean = profile.bg_mean + profile.organ_fraction * profile.contrast
    for _ in range(int(rng.integers(2, 5))):
        center = to_voxels(np.array([rng.uniform(0.5, 0.85), rng.uniform(0.45, 0.7), rng.uniform(0.25, 0.75)]))
        radii = rng.uniform(0.06, 0.12, size=3) * extent
        volume[_ellipsoid(shape, center, radii)] = organ_mean

    best = np.full(shape, np.inf)
    labels = np.zeros(shape, dtype=np.uint8)
    centerlines: Dict[int, np.ndarray] = {}
    radii_out: Dict[int, float] = {}
    bone = np.zeros(shape, dtype=bool)

    for seg in range(1, NUM_SEGMENTS + 1):
        side = segment_side(seg)
        index = (seg - 1) % 10
        ctrl = to_voxels(_control_points(index, side))
        ctrl = ctrl + rng.normal(0.0, 1.0, size=ctrl.shape) * jitter_vox
        radius = float(rng.uniform(*profile.radius_range))
        if seg in profile.harvested_segments:
            continue
        axis_pts, t = _sample_axis(ctrl)
        centerlines[seg] = axis_pts
        radii_out[seg] = radius

        # rib stub continuing laterally/posteriorly from the rib end
        rib_dir = ctrl[0] - ctrl[1]
        rib_dir /= np.linalg.norm(rib_dir) + 1e-12
        rib_pts = ctrl[0] + np.outer(np.linspace(radius, radius + 0.08 * extent[2], 24), rib_dir)
        _paint_bone(bone, rib_pts, radius * 1.1)

        lo = np.maximum(np.floor(axis_pts.min(0) - radius - 2), 0).astype(int)
        hi = np.minimum(np.ceil(axis_pts.max(0) + radius + 3), np.array(shape)).astype(int)
        if np.any(hi <= lo):
            continue
        zz, yy, xx = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
        vox = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
        dist, idx = cKDTree(axis_pts).query(vox)
        r_local = radius * (1.0 - (1.0 - _TAPER) * t[idx])
        inside = dist <= r_local
        sub = tuple(slice(a, b) for a, b in zip(lo, hi))
        best_sub = best[sub].reshape(-1)
        lab_sub = labels[sub].reshape(-1)
        win = inside & (dist < best_sub)
        best_sub[win] = dist[win]
        lab_sub[win] = seg
        best[sub] = best_sub.reshape(hi - lo)
        labels[sub] = lab_sub.reshape(hi - lo)

    # sternum: a bar along z at the midline, in front of the sternal ends
    sternum_pts = to_voxels(
        np.stack([np.linspace(0.08, 0.72, 64), np.full(64, 0.24), np.full(64, 0.5)], axis=1)
    )
    _paint_bone(bone, sternum_pts, 0.025 * extent[2])

    fg = labels > 0
    volume[bone & ~fg] = profile.bone_mean
    volume[fg] = profile.fg_mean
    speckle = fg & (rng.random(shape) < profile.calcification_prob)
    volume[speckle] += profile.calcification_boost
    volume += rng.normal(0.0, profile.noise_sigma, size=shape)

    for seg in list(centerlines):
        if not np.any(labels == seg):
            # fully occluded or clipped away by the grid border
            logger.warning("segment %d has no voxels inside the grid; dropping it", seg)
            centerlines.pop(seg)
            radii_out.pop(seg)

    return PhantomCase(
        volume=VolumeGrid(volume.astype(np.float32), profile.spacing),
        labels=LabelGrid(labels, NUM_CLASSES, profile.spacing),
        gt_centerlines=centerlines,
        radii=radii_out,
    )


def _paint_bone(bone: np.ndarray, pts: np.ndarray, radius: float):
    shape = np.array(bone.shape)
    lo = np.maximum(np.floor(pts.min(0) - radius - 1), 0).astype(int)
    hi = np.minimum(np.ceil(pts.max(0) + radius + 2), shape).astype(int)
    if np.any(hi <= lo):
        return
    zz, yy, xx = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
    vox = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    dist, _ = cKDTree(pts).query(vox)
    sub = tuple(slice(a, b) for a, b in zip(lo, hi))
    bone[sub] |= (dist <= radius).reshape(hi - lo)


# ----------------------------------------------------------------------------
# dataset files


def case_paths(directory: Path, case_id: str) -> Dict[str, Path]:
    directory = Path(directory)
    return {
        "image": directory / f"case_{case_id}.img",
        "labels": directory / f"case_{case_id}.lab",
        "centerlines": directory / f"case_{case_id}.centerlines.json",
    }


def save_case(directory, case_id: str, case: PhantomCase):
    paths = case_paths(directory, case_id)
    write_grid(paths["image"], case.volume)
    write_grid(paths["labels"], case.labels)
    payload = {
        str(seg): {"radius": case.radii.get(seg), "points": np.round(pts, 6).tolist()}
        for seg, pts in sorted(case.gt_centerlines.items())
    }
    paths["centerlines"].write_text(json.dumps(payload))


def load_case(directory, case_id: str) -> PhantomCase:
    paths = case_paths(directory, case_id)
    volume = read_grid(paths["image"])
    labels = read_grid(paths["labels"])
    centerlines, radii = {}, {}
    if paths["centerlines"].exists():
        for seg, entry in json.loads(paths["centerlines"].read_text()).items():
            centerlines[int(seg)] = np.asarray(entry["points"], dtype=np.float64)
            if entry.get("radius") is not None:
                radii[int(seg)] = float(entry["radius"])
    return PhantomCase(volume, labels, centerlines, radii)


def split_seeds(profile: PhantomProfile, split: str, n_cases: int) -> List[int]:
    if split not in SPLITS:
        raise PhantomError(f"unknown split {split!r}")
    ss = np.random.SeedSequence([int(profile.rng_seed), SPLITS.index(split)])
    seeds = [int(s) for s in ss.generate_state(n_cases, dtype=np.uint32)]
    if len(set(seeds)) != len(seeds):
        raise PhantomError("seed collision; pick another rng_seed")
    return seeds


def _write_one(args):
    profile, directory, case_id, seed = args
    save_case(directory, case_id, generate_case(profile, seed))
    return case_id


def generate_dataset(
    profile: PhantomProfile,
    n_cases: int,
    split: str,
    out_dir,
    workers: int = 1,
    seeds: Optional[Sequence[int]] = None,
) -> Path:
    """Write ``n_cases`` phantoms plus ``manifest.json`` into ``out_dir``.

    The ``ood`` split is generated from :func:`ood_profile` of ``profile``.
    """
    if n_cases < 1:
        raise PhantomError("n_cases must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PhantomError(f"cannot create {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise PhantomError(f"output directory {out_dir} is not writable")
    effective = ood_profile(profile) if split == "ood" else profile
    seeds = list(seeds) if seeds is not None else split_seeds(profile, split, n_cases)
    ids = [f"{split}{i:03d}" for i in range(n_cases)]
    jobs = [(effective, out_dir, cid, s) for cid, s in zip(ids, seeds)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_write_one, jobs))
    else:
        for job in jobs:
            _write_one(job)
    manifest = {
        "split": split,
        "profile": effective.to_json(),
        "cases": [{"id": cid, "seed": s} for cid, s in zip(ids, seeds)],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    logger.info("wrote %d %s cases to %s", n_cases, split, out_dir)
    return out_dir


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise PhantomError(f"no manifest.json in {directory}")
    return json.loads(path.read_text())


def regenerate_from_manifest(directory, out_dir) -> Path:
    manifest = load_manifest(directory)
    profile = PhantomProfile.from_json(manifest["profile"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest["cases"]:
        save_case(out_dir, entry["id"], generate_case(profile, entry["seed"]))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir
