"""Motion-aware modulation: mean-subtracted offsets from adjacent frames drive a bounded gain."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class MotionField:
    raw: torch.Tensor  # (..., T-1, 2, H, W), tanh range
    centered: torch.Tensor  # (..., T-1, 2, H, W), zero spatial mean per channel
    gain: torch.Tensor  # (..., T-1, H, W, d_f), |gain| < alpha


def center_offsets(u: torch.Tensor) -> torch.Tensor:
    """Subtract the spatial mean of each offset channel (cancels global/camera motion)."""
    return u - u.mean(dim=(-2, -1), keepdim=True)


class MotionModulator(nn.Module):
    def __init__(self, D: int, d_f: int, alpha: float = 0.5, init_std: float = 1e-3):
        super().__init__()
        self.D, self.d_f, self.alpha = D, d_f, alpha
        self.psi = nn.Conv2d(2 * D, 2, kernel_size=3, padding=1)
        self.phi = nn.Conv2d(2, d_f, kernel_size=1)
        for conv in (self.psi, self.phi):
            nn.init.normal_(conv.weight, std=init_std)
            nn.init.zeros_(conv.bias)

    def estimate(self, patch: torch.Tensor) -> MotionField:
        """patch: (..., T, H, W, D) encoder features."""
        *lead, T, H, W, D = patch.shape
        if D != self.D:
            raise ValueError(f"motion module expects D={self.D}, features have D={D}")
        if T < 2:
            empty = patch.new_zeros(*lead, 0, 2, H, W)
            return MotionField(empty, empty, patch.new_zeros(*lead, 0, H, W, self.d_f))
        pair = torch.cat([patch[..., :-1, :, :, :], patch[..., 1:, :, :, :]], dim=-1)
        x = pair.reshape(-1, H, W, 2 * D).permute(0, 3, 1, 2)
        u = torch.tanh(self.psi(x))
        r = center_offsets(u)
        gain = self.alpha * torch.tanh(self.phi(r))
        return MotionField(
            u.reshape(*lead, T - 1, 2, H, W),
            r.reshape(*lead, T - 1, 2, H, W),
            gain.permute(0, 2, 3, 1).reshape(*lead, T - 1, H, W, self.d_f),
        )

    def forward(self, patch: torch.Tensor) -> MotionField:
        return self.estimate(patch)


def modulate(z: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    """(1 + gain_t) * z_t for t < T-1, broadcast over classes; the last frame passes through.

    z: (..., T, H, W, M, d_f); gain: (..., T-1, H, W, d_f).
    """
    T = z.shape[-5]
    if gain.shape[-4] != T - 1 or gain.shape[-3:] != (z.shape[-4], z.shape[-3], z.shape[-1]):
        raise ValueError(f"gain shape {tuple(gain.shape)} does not fit volume {tuple(z.shape)}")
    if T == 1:
        return z
    head = z[..., :-1, :, :, :, :] * (1 + gain).unsqueeze(-2)
    return torch.cat([head, z[..., -1:, :, :, :, :]], dim=-5)
