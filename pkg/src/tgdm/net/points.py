"""Reading features at normalized point coordinates and writing them back.

Points are (B, N, 3) in (z, y, x) order with 0 and 1 at the first and last
voxel centres of the map (align-corners convention).
"""
from __future__ import annotations

import itertools

import torch
import torch.nn.functional as F

_CORNERS = torch.tensor(list(itertools.product((0, 1), repeat=3)))


def _check(feat: torch.Tensor, pts: torch.Tensor):
    if feat.dim() != 5 or pts.dim() != 3 or pts.shape[-1] != 3 or pts.shape[0] != feat.shape[0]:
        raise ValueError(f"bad shapes: features {tuple(feat.shape)}, points {tuple(pts.shape)}")


def _nearest_index(pts: torch.Tensor, shape) -> torch.Tensor:
    size = torch.tensor(shape, device=pts.device) - 1
    idx = torch.round(pts.clamp(0, 1) * size).long()
    return (idx[..., 0] * shape[1] + idx[..., 1]) * shape[2] + idx[..., 2]


def sample_features(feat: torch.Tensor, pts: torch.Tensor, mode: str = "trilinear") -> torch.Tensor:
    """Features at each point, (B, N, C)."""
    _check(feat, pts)
    b, c = feat.shape[:2]
    if mode == "nearest":
        flat = _nearest_index(pts, feat.shape[2:])
        return torch.gather(feat.reshape(b, c, -1), 2, flat.unsqueeze(1).expand(b, c, -1)).transpose(1, 2)
    grid = (2 * pts.flip(-1) - 1).to(feat.dtype).view(b, 1, 1, -1, 3)
    out = F.grid_sample(feat, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out.view(b, c, -1).transpose(1, 2)


def scatter_features(values: torch.Tensor, pts: torch.Tensor, shape, mode: str = "trilinear") -> torch.Tensor:
    """Adjoint of ``sample_features``: splat (B, N, C) values into a (B, C, *shape) map."""
    b, n, c = values.shape
    out = values.new_zeros(b, c, shape[0] * shape[1] * shape[2])
    if mode == "nearest":
        flat = _nearest_index(pts, shape)
        return out.scatter_add(2, flat.unsqueeze(1).expand(b, c, n), values.transpose(1, 2)).view(b, c, *shape)
    size = torch.tensor(shape, device=pts.device, dtype=pts.dtype) - 1
    q = pts.clamp(0, 1) * size
    lo = torch.floor(q).detach()
    frac = q - lo
    lo = lo.long()
    hi_lim = torch.tensor(shape, device=pts.device) - 1
    idx, wts = [], []
    for corner in _CORNERS.to(pts.device):
        ci = torch.minimum(lo + corner, hi_lim)
        w = torch.where(corner.bool(), frac, 1 - frac).prod(-1)  # (B, N)
        idx.append((ci[..., 0] * shape[1] + ci[..., 1]) * shape[2] + ci[..., 2])
        wts.append(w)
    idx = torch.cat(idx, 1)  # (B, 8N)
    contrib = torch.cat([values * w.unsqueeze(-1) for w in wts], 1).to(values.dtype)
    return out.scatter_add(2, idx.unsqueeze(1).expand(b, c, -1), contrib.transpose(1, 2)).view(b, c, *shape)
