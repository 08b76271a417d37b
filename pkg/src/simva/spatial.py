"""Window and shifted-window self-attention over each (frame, class) similarity map."""

from __future__ import annotations

import torch
import torch.nn as nn


def window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    """(N, H, W, C) -> (N * nW, w*w, C), windows in row-major order."""
    N, H, W, C = x.shape
    x = x.view(N, H // w, w, W // w, w, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, C)


def window_reverse(windows: torch.Tensor, w: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // w, W // w, w, w, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, H, W, C)


def build_shift_mask(H: int, W: int, w: int, shift: int, dtype=torch.float64) -> torch.Tensor:
    """Additive mask (nW, w*w, w*w): 0 within a pre-shift region, -inf across regions.

    Regions are labelled on the cyclically shifted grid; tokens that wrapped
    around from the opposite edge carry a different label from their window
    neighbours.
    """
    if not 0 <= shift < w:
        raise ValueError(f"shift must satisfy 0 <= shift < window ({w}), got {shift}")
    nW = (H // w) * (W // w)
    if shift == 0:
        return torch.zeros(nW, w * w, w * w, dtype=dtype)
    labels = torch.zeros(1, H, W, 1)
    cnt = 0
    spans = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    for hs in spans:
        for ws in spans:
            labels[:, hs, ws, :] = cnt
            cnt += 1
    lw = window_partition(labels, w).squeeze(-1)
    diff = lw.unsqueeze(1) - lw.unsqueeze(2)
    mask = torch.zeros(nW, w * w, w * w, dtype=dtype)
    return mask.masked_fill(diff != 0, float("-inf"))


def relative_position_index(w: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, use_rel_pos_bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide d_f={dim}")
        self.dim, self.heads, self.window = dim, heads, window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.use_rel_pos_bias = use_rel_pos_bias
        if use_rel_pos_bias:
            self.rel_pos_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
            nn.init.trunc_normal_(self.rel_pos_bias, std=0.02)
            self.register_buffer("rel_index", relative_position_index(window), persistent=False)

    def bias(self) -> torch.Tensor | None:
        if not self.use_rel_pos_bias:
            return None
        n = self.window ** 2
        return self.rel_pos_bias[self.rel_index.reshape(-1)].view(n, n, -1).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                return_attn: bool = False):
        """x: (B_, n, C) windows; mask: (nW, n, n) additive, B_ a multiple of nW."""
        B_, n, C = x.shape
        qkv = self.qkv(x).reshape(B_, n, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias()
        if bias is not None:
            logits = logits + bias.unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            logits = logits.view(B_ // nW, nW, self.heads, n, n) + mask.to(logits.dtype)[None, :, None]
            logits = logits.view(B_, self.heads, n, n)
        attn = logits.softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(B_, n, C))
        return (out, attn) if return_attn else out


class SwinBlock(nn.Module):
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, window: int, shift: int = 0,
                 mlp_ratio: int = 4, use_rel_pos_bias: bool = True):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, use_rel_pos_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        self._mask_cache: dict = {}

    def mask(self, H: int, W: int, dtype) -> torch.Tensor:
        key = (H, W, dtype)
        if key not in self._mask_cache:
            self._mask_cache[key] = build_shift_mask(H, W, self.window, self.shift, dtype)
        return self._mask_cache[key]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (N, H, W, C)."""
        N, H, W, C = x.shape
        w, s = self.window, self.shift
        if H % w or W % w:
            raise ValueError(f"window size {w} must divide both H={H} and W={W}")
        h = self.norm1(x)
        if s:
            h = torch.roll(h, shifts=(-s, -s), dims=(1, 2))
        h = self.attn(window_partition(h, w), self.mask(H, W, x.dtype) if s else None)
        h = window_reverse(h, w, H, W)
        if s:
            h = torch.roll(h, shifts=(s, s), dims=(1, 2))
        x = x + h
        return x + self.mlp(self.norm2(x))


def block_shift(window: int, H: int, W: int) -> int:
    # a single window covering the whole grid makes shifting meaningless
    return 0 if window >= H and window >= W else window // 2


class SpatialAggregator(nn.Module):
    """Regular-window block followed by a shifted-window block, shared over (t, c)."""

    def __init__(self, dim: int, heads: int, window: int, H: int, W: int,
                 mlp_ratio: int = 4, use_rel_pos_bias: bool = True):
        super().__init__()
        if H % window or W % window:
            raise ValueError(f"window size {window} must divide both H={H} and W={W}")
        self.blocks = nn.ModuleList([
            SwinBlock(dim, heads, window, 0, mlp_ratio, use_rel_pos_bias),
            SwinBlock(dim, heads, window, block_shift(window, H, W), mlp_ratio, use_rel_pos_bias),
        ])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """z: (..., T, H, W, M, d_f) -> same shape."""
        *lead, T, H, W, M, C = z.shape
        x = z.movedim(-2, -4).reshape(-1, H, W, C)
        for blk in self.blocks:
            x = blk(x)
        return x.reshape(*lead, T, M, H, W, C).movedim(-4, -2)
