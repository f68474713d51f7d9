"""Point regression (PSM), grouped long-range module (GDM), the assembled
stage-2 network and checkpoint I/O."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import torch
import torch.nn as nn

from tgdm.net.config import NetConfig
from tgdm.net.points import sample_features, scatter_features
from tgdm.net.unet import LightUNet, ResUNet
from tgdm.ssm import MambaBlock

CKPT_MAGIC = "TGDM-CKPT-v1"
_LOGIT_EPS = 1e-4

PointList = List[Optional[torch.Tensor]]


class CheckpointError(ValueError):
    pass


def _pack(points: Sequence[torch.Tensor]):
    """Pad (B, N_i, 3) sets to a common length by repeating their last point.

    Padding goes at the end, so causal sequence models see the real points unchanged.
    """
    lengths = [p.shape[1] for p in points]
    L = max(lengths)
    padded = [torch.cat([p, p[:, -1:].expand(-1, L - p.shape[1], -1)], 1) for p in points]
    return torch.stack(padded, 1), lengths  # (B, S, L, 3)


class PSM(nn.Module):
    """Shared point-set regressor: features at the template points plus their
    coordinates go through fc, one Mamba block and a 3-d head. The head output
    offsets the template in logit space, so predictions stay in [0, 1] and the
    untrained module starts near the template."""

    def __init__(self, channels: int, hidden: int, d_state: int = 16, chunk: Optional[int] = 32, sampling: str = "trilinear"):
        super().__init__()
        self.sampling = sampling
        self.fc_in = nn.Linear(channels + 3, hidden)
        self.mamba = MambaBlock(hidden, d_state, chunk_size=chunk)
        self.fc_out = nn.Linear(hidden, 3)
        nn.init.normal_(self.fc_out.weight, std=1e-3)
        nn.init.zeros_(self.fc_out.bias)

    def forward(self, feat: torch.Tensor, p_init: PointList) -> PointList:
        present = [i for i, p in enumerate(p_init) if p is not None]
        if not present:
            return list(p_init)
        pts, lengths = _pack([p_init[i].to(feat.dtype) for i in present])
        b, s, L, _ = pts.shape
        x = sample_features(feat, pts.reshape(b, s * L, 3), self.sampling).reshape(b * s, L, -1)
        coords = pts.reshape(b * s, L, 3)
        h = self.mamba(self.fc_in(torch.cat([x, coords], -1)))
        p = coords.clamp(_LOGIT_EPS, 1 - _LOGIT_EPS)
        out = torch.sigmoid(torch.logit(p) + self.fc_out(h)).reshape(b, s, L, 3)
        result = list(p_init)
        for k, (i, n) in enumerate(zip(present, lengths)):
            result[i] = out[:, k, :n]
        return result


class GDM(nn.Module):
    """One fc + Mamba branch per segment. Each branch transforms the features
    read at its predicted points and splats them back into the map as a
    residual update."""

    def __init__(self, channels: int, num_segments: int = 20, d_state: int = 16, chunk: Optional[int] = 32, sampling: str = "trilinear"):
        super().__init__()
        self.channels = channels
        self.sampling = sampling
        self.fc_in = nn.ModuleList(nn.Linear(channels, channels) for _ in range(num_segments))
        self.mamba = nn.ModuleList(MambaBlock(channels, d_state, chunk_size=chunk) for _ in range(num_segments))

    def updates(self, feat: torch.Tensor, p_pred: PointList, active: Optional[Iterable[int]] = None):
        """Per-segment (points, transformed features) pairs."""
        if feat.shape[1] != self.channels:
            raise ValueError(f"GDM expects {self.channels} channels, got {feat.shape[1]}")
        keep = set(range(len(self.mamba))) if active is None else set(active)
        out = []
        for i, p in enumerate(p_pred):
            if p is None or i not in keep:
                continue
            x = sample_features(feat, p, self.sampling)
            out.append((p, self.mamba[i](self.fc_in[i](x))))
        return out

    def forward(self, feat: torch.Tensor, p_pred: PointList, active: Optional[Iterable[int]] = None) -> torch.Tensor:
        ups = self.updates(feat, p_pred, active)
        if not ups:
            return feat
        pts = torch.cat([p for p, _ in ups], 1).to(feat.dtype)
        vals = torch.cat([v for _, v in ups], 1)
        return feat + scatter_features(vals, pts, feat.shape[2:], self.sampling)


class TGDMNet(nn.Module):
    """Residual U-Net whose bottleneck is refined by PSM + GDM when enabled."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.backbone = ResUNet(config.in_channels, config.num_classes, config.stage2_levels, config.stage2_base)
        if config.use_tgdm:
            c = self.backbone.bottleneck_channels
            self.psm = PSM(c, config.hidden, config.d_state, config.scan_chunk, config.sampling)
            self.gdm = GDM(c, config.num_segments, config.d_state, config.scan_chunk, config.sampling)

    def forward(self, x: torch.Tensor, p_init: Optional[PointList] = None, active=None):
        if not self.config.use_tgdm:
            return self.backbone(x), None
        if p_init is None:
            raise ValueError("TGDM forward needs template points")
        if len(p_init) != self.config.num_segments:
            raise ValueError(f"expected {self.config.num_segments} point sets, got {len(p_init)}")
        bottleneck, skips = self.backbone.encode(x)
        p_pred = self.psm(bottleneck, p_init)
        bottleneck = self.gdm(bottleneck, p_pred, active)
        return self.backbone.decode(bottleneck, skips), p_pred


def build_stage1(config: NetConfig) -> LightUNet:
    return LightUNet(1, config.stage1_classes, config.stage1_levels, config.stage1_base)


def build_model(config: NetConfig, kind: str) -> nn.Module:
    if kind == "stage1":
        return build_stage1(config)
    if kind == "stage2":
        return TGDMNet(config)
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model: nn.Module, config: NetConfig, kind: str, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "magic": CKPT_MAGIC,
            "kind": kind,
            "config": json.dumps(config.to_json()),
            "meta": json.dumps(meta or {}),
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path, map_location="cpu"):
    """Returns (model, config, meta). The model is in eval mode."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        blob = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a {CKPT_MAGIC} checkpoint")
    config = NetConfig.from_json(blob["config"])
    model = build_model(config, blob["kind"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, config, {"kind": blob["kind"], **json.loads(blob["meta"])}
