"""Forward-only selective state-space scan over each (i, j, c) similarity trajectory."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-6


def rms_norm(x: torch.Tensor, scale: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return x * scale / torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def selective_scan(u, delta, A, B, C, D=None, return_states: bool = False):
    """h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t,  y_t = C_t . h_t + D u_t.

    u, delta: (batch, T, E); A: (E, N); B, C: (batch, T, N). Returns (batch, T, E),
    plus the (batch, T, E, N) hidden states when ``return_states``.
    """
    batch, T, E = u.shape
    dA = torch.exp(delta.unsqueeze(-1) * A)
    dBu = delta.unsqueeze(-1) * B.unsqueeze(2) * u.unsqueeze(-1)
    h = u.new_zeros(batch, E, A.shape[1])
    ys, states = [], []
    for t in range(T):
        h = dA[:, t] * h + dBu[:, t]
        ys.append(torch.einsum("ben,bn->be", h, C[:, t]))
        if return_states:
            states.append(h)
    y = torch.stack(ys, dim=1)
    if D is not None:
        y = y + u * D
    if return_states:
        return y, torch.stack(states, dim=1)
    return y


class SelectiveScanBlock(nn.Module):
    """y = x + out_proj(scan(silu(conv(x_in))) * silu(gate)), with RMSNorm in front."""

    def __init__(self, d_model: int, state_dim: int = 16, expand: int = 2, dt_rank: int | None = None,
                 conv_kernel: int = 4, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        E = expand * d_model
        self.d_model, self.E, self.N = d_model, E, state_dim
        self.dt_rank = dt_rank or math.ceil(d_model / 16)
        self.k = conv_kernel
        self.rms_scale = nn.Parameter(torch.ones(d_model))
        self.in_proj = nn.Linear(d_model, 2 * E, bias=False)
        self.depthwise_conv = nn.Conv1d(E, E, conv_kernel, groups=E, padding=conv_kernel - 1)
        self.x_proj = nn.Linear(E, self.dt_rank + 2 * state_dim, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, E)
        std = self.dt_rank ** -0.5
        nn.init.uniform_(self.dt_proj.weight, -std, std)
        dt = torch.exp(torch.rand(E) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        dt = dt.clamp(min=1e-4)
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_dim + 1, dtype=torch.float32)).repeat(E, 1))
        self.D_skip = nn.Parameter(torch.ones(E))
        self.out_proj = nn.Linear(E, d_model, bias=False)

    def ssm_inputs(self, x: torch.Tensor):
        """Normalized trajectories (batch, T, d_model) -> scan inputs and gate."""
        T = x.shape[1]
        x_in, gate = self.in_proj(x).chunk(2, dim=-1)
        xc = self.depthwise_conv(x_in.transpose(1, 2))[..., :T].transpose(1, 2)
        xc = F.silu(xc)
        dt, B, C = self.x_proj(xc).split([self.dt_rank, self.N, self.N], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        return xc, delta, -torch.exp(self.A_log), B, C, gate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (batch, T, d_model)."""
        u, delta, A, B, C, gate = self.ssm_inputs(rms_norm(x, self.rms_scale))
        y = selective_scan(u, delta, A, B, C, self.D_skip)
        return x + self.out_proj(y * F.silu(gate))


class TemporalAggregator(nn.Module):
    def __init__(self, d_model: int, **kw):
        super().__init__()
        self.block = SelectiveScanBlock(d_model, **kw)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """z: (..., T, H, W, M, d_f); every (i, j, c) is an independent length-T sequence."""
        *lead, T, H, W, M, C = z.shape
        x = z.movedim(-5, -2).reshape(-1, T, C)
        y = self.block(x)
        return y.reshape(*lead, H, W, M, T, C).movedim(-2, -5)
