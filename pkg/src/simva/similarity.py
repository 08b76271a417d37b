"""Patch-text cosine similarity volume and its 7x7 convolutional embedding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

KERNEL = 7


class SingularityError(ValueError):
    pass


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@dataclass
class SimilarityVolume:
    values: torch.Tensor  # (..., T, H, W, M)
    class_indices: list[int]


def cosine_volume(patch: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """values[..., t, i, j, c] = cos(patch[..., t, i, j, :], text[..., c, :]).

    ``patch`` is (..., T, H, W, D) and ``text`` is (..., M, D) with matching
    leading dims (or an unbatched (M, D) text).
    """
    if patch.shape[-1] != text.shape[-1]:
        raise ValueError(f"feature dim mismatch: patches D={patch.shape[-1]}, text D={text.shape[-1]}")
    pn = patch.norm(dim=-1, keepdim=True)
    tn = text.norm(dim=-1, keepdim=True)
    if (pn == 0).any():
        loc = tuple(torch.nonzero(pn[..., 0] == 0)[0].tolist())
        raise SingularityError(f"zero-norm patch feature at index {loc}")
    if (tn == 0).any():
        loc = tuple(torch.nonzero(tn[..., 0] == 0)[0].tolist())
        raise SingularityError(f"zero-norm text embedding at class row {loc}")
    p = patch / pn
    q = text / tn
    if q.dim() == 2:
        return torch.einsum("...thwd,md->...thwm", p, q)
    return torch.einsum("...thwd,...md->...thwm", p, q)


def build_similarity(patch_features, text_embeddings, class_indices: Sequence[int] | None = None,
                     dtype=None) -> SimilarityVolume:
    patch = as_tensor(patch_features, dtype)
    text = as_tensor(text_embeddings, dtype)
    values = cosine_volume(patch, text)
    idx = list(class_indices) if class_indices is not None else list(range(text.shape[-2]))
    return SimilarityVolume(values, idx)


def embed_volume(sim: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Shared 7x7 conv over each (t, c) similarity map: (..., T, H, W, M) -> (..., T, H, W, M, d_f).

    ``kernel`` is 7 x 7 x 1 x d_f. Zero padding keeps H x W.
    """
    *lead, T, H, W, M = sim.shape
    d_f = kernel.shape[-1]
    x = sim.movedim(-1, -3).reshape(-1, 1, H, W)
    weight = kernel.permute(3, 2, 0, 1)
    y = F.conv2d(x, weight, bias, padding=KERNEL // 2)
    y = y.reshape(*lead, T, M, d_f, H, W)
    return y.permute(*range(len(lead)), -5, -2, -1, -4, -3)


class EmbedConv(nn.Module):
    def __init__(self, d_f: int):
        super().__init__()
        bound = 1.0 / KERNEL
        self.kernel = nn.Parameter(torch.empty(KERNEL, KERNEL, 1, d_f).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(d_f).uniform_(-bound, bound))

    def forward(self, sim: torch.Tensor) -> torch.Tensor:
        return embed_volume(sim, self.kernel, self.bias)


class VolumeEmbedding(nn.Module):
    """Registered as ``embed`` so parameters are ``embed.conv.kernel`` / ``embed.conv.bias``."""

    def __init__(self, d_f: int):
        super().__init__()
        self.conv = EmbedConv(d_f)

    def forward(self, sim: torch.Tensor) -> torch.Tensor:
        return self.conv(sim)
