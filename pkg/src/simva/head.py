"""Per-position linear scores, space-time pooling, and the two cross-entropy terms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class InvariantError(RuntimeError):
    """A contract between pipeline stages was broken (e.g. GT missing from I_M)."""


@dataclass
class LossReport:
    loss_agg: torch.Tensor
    loss_cls: torch.Tensor
    loss_total: torch.Tensor
    logits: torch.Tensor  # (..., M)
    global_logits: torch.Tensor  # (..., N_C)


class Head(nn.Module):
    def __init__(self, d_f: int):
        super().__init__()
        self.linear = nn.Linear(d_f, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return pool_logits(z, self.linear.weight, self.linear.bias)


def score_map(z: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """s(t, i, j, c): (..., T, H, W, M, d_f) -> (..., T, H, W, M)."""
    return F.linear(z, weight, bias).squeeze(-1)


def pool_logits(z: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Average the score map over (t, i, j): returns (..., M)."""
    return score_map(z, weight, bias).mean(dim=(-4, -3, -2))


def gt_positions(indices: Sequence[Sequence[int]], gt: Sequence[int]) -> torch.Tensor:
    pos = []
    for idx, g in zip(indices, gt):
        idx = list(idx)
        if g not in idx:
            raise InvariantError(f"ground-truth class {g} is not among the sampled classes {idx}")
        pos.append(idx.index(g))
    return torch.tensor(pos, dtype=torch.long)


def loss_agg(logits: torch.Tensor, gt_position, tau_agg: float = 1.0) -> torch.Tensor:
    """Cross-entropy over the sampled classes, batch-averaged."""
    logits2 = logits.reshape(-1, logits.shape[-1])
    target = torch.as_tensor(gt_position, dtype=torch.long).reshape(-1)
    if ((target < 0) | (target >= logits2.shape[-1])).any():
        raise InvariantError(f"gt position {target.tolist()} outside the {logits2.shape[-1]} sampled logits")
    return F.cross_entropy(logits2 / tau_agg, target)


def loss_cls(prior_scores: torch.Tensor, gt, tau_cls: float = 0.01) -> torch.Tensor:
    """Cross-entropy of the global cosine prior over the full vocabulary."""
    scores = prior_scores.reshape(-1, prior_scores.shape[-1])
    target = torch.as_tensor(gt, dtype=torch.long).reshape(-1)
    n_c = scores.shape[-1]
    if ((target < 0) | (target >= n_c)).any():
        raise ValueError(f"class index {target.tolist()} outside [0, {n_c})")
    return F.cross_entropy(scores / tau_cls, target)


def total_loss(logits, gt_position, prior_scores, gt, tau_agg: float = 1.0,
               tau_cls: float = 0.01) -> LossReport:
    la = loss_agg(logits, gt_position, tau_agg)
    lc = loss_cls(prior_scores, gt, tau_cls)
    return LossReport(la, lc, la + lc, logits, prior_scores / tau_cls)
