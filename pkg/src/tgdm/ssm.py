"""Selective state-space core: zero-order-hold discretization, the linear
recurrence scan and the gated Mamba block built around it."""
from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

TAYLOR_EPS = 1e-4


def _phi(z: torch.Tensor) -> torch.Tensor:
    """(exp(z) - 1) / z, continued by 1 + z/2 near the removable singularity at 0."""
    small = z.abs() < TAYLOR_EPS
    z_safe = torch.where(small, torch.ones_like(z), z)
    return torch.where(small, 1.0 + 0.5 * z, torch.expm1(z_safe) / z_safe)


def discretize(delta: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Zero-order hold for a diagonal system, elementwise with broadcasting.

    Returns ``A_bar = exp(delta * a)`` and
    ``B_bar = (delta * a)^-1 (exp(delta * a) - 1) * delta * b``.
    """
    delta, a, b = (torch.as_tensor(t) for t in (delta, a, b))
    if not delta.is_meta and bool((delta <= 0).any()):
        raise ValueError("discretization step delta must be positive")
    z = delta * a
    return torch.exp(z), _phi(z) * delta * b


def _check_inputs(x, delta, A, B, C):
    if x.dim() != 3 or delta.shape != x.shape:
        raise ValueError(f"x and delta must share shape (batch, L, d); got {tuple(x.shape)}, {tuple(delta.shape)}")
    if A.dim() != 2 or A.shape[0] != x.shape[-1]:
        raise ValueError(f"A must have shape (d, n); got {tuple(A.shape)}")
    n = A.shape[1]
    for name, m in (("B", B), ("C", C)):
        if m.shape != (*x.shape[:2], n):
            raise ValueError(f"{name} must have shape (batch, L, {n}); got {tuple(m.shape)}")
    if not x.is_meta and not bool(torch.isfinite(x).all()):
        raise ValueError("non-finite input to selective scan")


def selective_scan(
    x: torch.Tensor,
    delta: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: Optional[torch.Tensor] = None,
    chunk_size: Optional[int] = None,
) -> torch.Tensor:
    """Run ``h_t = A_bar_t h_{t-1} + B_bar_t x_t``, ``y_t = C_t h_t`` from ``h_0 = 0``.

    Shapes: ``x, delta`` (batch, L, d); ``A`` (d, n); ``B, C`` (batch, L, n);
    optional skip ``D`` (d,). With ``chunk_size`` the recurrence is evaluated
    blockwise in parallel instead of step by step.
    """
    _check_inputs(x, delta, A, B, C)
    A_bar, B_bar = discretize(delta.unsqueeze(-1), A, B.unsqueeze(2))  # (b, L, d, n)
    u = B_bar * x.unsqueeze(-1)
    if chunk_size:
        h = _chunked_states(delta.unsqueeze(-1) * A, u, chunk_size)
    else:
        h = _sequential_states(A_bar, u)
    y = torch.einsum("bldn,bln->bld", h, C)
    if D is not None:
        y = y + x * D
    return y


def _sequential_states(A_bar: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    h = torch.zeros_like(u[:, 0])
    states = []
    for t in range(u.shape[1]):
        h = A_bar[:, t] * h + u[:, t]
        states.append(h)
    return torch.stack(states, dim=1)


def _chunked_states(log_a: torch.Tensor, u: torch.Tensor, chunk_size: int) -> torch.Tensor:
    """Blockwise closed form of the recurrence.

    Within a block, h_t = exp(S_t) h_in + sum_{s<=t} exp(S_t - S_s) u_s with S the
    running sum of log A_bar; every exponent is <= 0 so nothing overflows.
    """
    b, L, d, n = u.shape
    h_in = torch.zeros(b, d, n, dtype=u.dtype, device=u.device)
    out = []
    for start in range(0, L, chunk_size):
        la = log_a[:, start : start + chunk_size]
        uu = u[:, start : start + chunk_size]
        k = la.shape[1]
        S = torch.cumsum(la, dim=1)  # (b, k, d, n)
        diff = S.unsqueeze(2) - S.unsqueeze(1)  # [t, s] = S_t - S_s
        mask = torch.tril(torch.ones(k, k, dtype=torch.bool, device=u.device)).view(1, k, k, 1, 1)
        decay = torch.exp(torch.where(mask, diff, torch.full_like(diff, -math.inf)))
        h = torch.einsum("btsdn,bsdn->btdn", decay, uu) + torch.exp(S) * h_in.unsqueeze(1)
        out.append(h)
        h_in = h[:, -1]
    return torch.cat(out, dim=1)


class MambaBlock(nn.Module):
    """Gated selective-SSM block mapping (batch, L, d_model) to the same shape.

    in_proj splits into a scan branch (causal depthwise conv + SiLU + selective
    scan) and a SiLU gate; their product goes through out_proj. A is kept
    negative as ``-exp(A_log)``; delta is the softplus of a low-rank projection.
    """

    def __init__(
        self,
        d_model: int,
        d_state: int = 16,
        d_conv: int = 4,
        expand: int = 2,
        dt_rank: Optional[int] = None,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
        chunk_size: Optional[int] = None,
    ):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.d_inner = expand * d_model
        self.dt_rank = dt_rank or max(1, math.ceil(d_model / 16))
        self.chunk_size = chunk_size

        self.in_proj = nn.Linear(d_model, 2 * self.d_inner, bias=False)
        self.conv1d = nn.Conv1d(self.d_inner, self.d_inner, d_conv, groups=self.d_inner, padding=d_conv - 1)
        self.x_proj = nn.Linear(self.d_inner, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, self.d_inner)
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)

        A = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(self.d_inner, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(self.d_inner))

        # delta initialised log-uniformly in [dt_min, dt_max] through the softplus
        dt = torch.exp(torch.rand(self.d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def ssm_inputs(self, x: torch.Tensor):
        """Scan-branch activations and the (delta, A, B, C) they select."""
        L = x.shape[1]
        xi, z = self.in_proj(x).chunk(2, dim=-1)
        xi = self.conv1d(xi.transpose(1, 2))[..., :L].transpose(1, 2)
        xi = F.silu(xi)
        dt, Bm, Cm = self.x_proj(xi).split([self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        A = -torch.exp(self.A_log)
        return xi, z, delta, A, Bm, Cm

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ValueError(f"expected (batch, L, {self.d_model}), got {tuple(x.shape)}")
        xi, z, delta, A, Bm, Cm = self.ssm_inputs(x)
        y = selective_scan(xi, delta, A, Bm, Cm, self.D, chunk_size=self.chunk_size)
        return self.out_proj(y * F.silu(z))
