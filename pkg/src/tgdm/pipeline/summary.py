"""Parameter counts and multiply-accumulate estimates.

MACs are counted by forward hooks while the model runs on the ``meta``
device, so full-size configurations cost no memory or compute.
"""
from __future__ import annotations

from collections import defaultdict
from typing import Dict

import torch
import torch.nn as nn

from tgdm.net import NetConfig, TGDMNet, build_stage1
from tgdm.ssm import MambaBlock


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _macs(module: nn.Module, inputs, output) -> tuple:
    x = inputs[0]
    if isinstance(module, (nn.Conv1d, nn.Conv3d)):
        k = module.weight[0].numel()  # (cin / groups) * prod(kernel)
        return "conv", output.numel() * k
    if isinstance(module, nn.ConvTranspose3d):
        k = module.weight.shape[1] * module.weight[0, 0].numel()  # (cout / groups) * prod(kernel)
        return "conv", x.numel() * k
    if isinstance(module, nn.Linear):
        return "linear", output.numel() * module.in_features
    if isinstance(module, MambaBlock):
        b, L, _ = x.shape
        # per step, channel and state: h = a*h + b*x (2) and y += c*h (1)
        return "scan", 3 * b * L * module.d_inner * module.d_state
    return None, 0


def summarize_module(model: nn.Module, *inputs) -> Dict[str, int]:
    """Params and per-kind MACs of one forward pass on ``inputs`` (batch 1 expected)."""
    totals: Dict[str, int] = defaultdict(int)

    def hook(module, inp, out):
        kind, n = _macs(module, inp, out)
        if kind:
            totals[kind] += int(n)

    handles = [m.register_forward_hook(hook) for m in model.modules()]
    try:
        with torch.no_grad():
            model(*inputs)
    finally:
        for h in handles:
            h.remove()
    out = {"params": count_params(model), "conv_macs": 0, "linear_macs": 0, "scan_macs": 0}
    for kind, n in totals.items():
        out[f"{kind}_macs"] = n
    out["macs"] = out["conv_macs"] + out["linear_macs"] + out["scan_macs"]
    return out


def _template(config: NetConfig, device, counts=None):
    counts = counts or [round((8 + 32) / 2)] * config.num_segments
    return [torch.zeros(1, n, 3, device=device) for n in counts]


def model_summary(config: NetConfig, point_counts=None) -> Dict[str, Dict[str, int]]:
    """Per-stage and total parameter counts and MACs at the configured input shapes."""
    meta = torch.device("meta")
    with meta:
        stage1 = build_stage1(config)
        stage2 = TGDMNet(config)
    s1 = summarize_module(stage1, torch.zeros(1, 1, *config.stage1_shape, device=meta))
    p_init = _template(config, meta, point_counts) if config.use_tgdm else None
    s2 = summarize_module(stage2, torch.zeros(1, config.in_channels, *config.stage2_shape, device=meta), p_init)
    total = {k: s1[k] + s2[k] for k in s1}
    return {"stage1": s1, "stage2": s2, "total": total}


def format_summary(summary: Dict[str, Dict[str, int]]) -> str:
    lines = [f"{'':<8}{'Param (M)':>12}{'GMACs':>12}"]
    for name, s in summary.items():
        lines.append(f"{name:<8}{s['params'] / 1e6:>12.3f}{s['macs'] / 1e9:>12.2f}")
    return "\n".join(lines)
