"""Global video-text prior and top-M candidate class sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .similarity import SingularityError, as_tensor


@dataclass
class GlobalAlignment:
    video_vec: torch.Tensor  # (..., D), unit norm
    prior_scores: torch.Tensor  # (..., N_C)


@dataclass
class SampledVocabulary:
    indices: list[int]
    restricted_embeddings: np.ndarray | torch.Tensor
    noise_applied: bool = False
    gt_index: int | None = None

    @property
    def gt_position(self) -> int | None:
        return None if self.gt_index is None else self.indices.index(self.gt_index)


def global_alignment(cls_tokens, text_embeddings, dtype=None) -> GlobalAlignment:
    """Mean-pool frame CLS tokens, L2-normalize, and score every class by cosine."""
    cls = as_tensor(cls_tokens, dtype)
    text = as_tensor(text_embeddings, dtype)
    v = cls.mean(dim=-2)
    n = v.norm(dim=-1, keepdim=True)
    if (n == 0).any():
        raise SingularityError("mean CLS token has zero norm")
    tn = text.norm(dim=-1, keepdim=True)
    if (tn == 0).any():
        loc = torch.nonzero(tn[..., 0] == 0)[0].tolist()
        raise SingularityError(f"zero-norm text embedding at class row {loc}")
    video_vec = v / n
    return GlobalAlignment(video_vec, video_vec @ (text / tn).transpose(-1, -2))


def top_m(scores: np.ndarray, M: int) -> np.ndarray:
    """Indices of the M largest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:M]


def sample_classes(prior_scores, text_embeddings, M: int, training: bool,
                   gt: int | None = None, rng_seed: int = 0,
                   noise_high: float = 0.5) -> SampledVocabulary:
    scores = np.asarray(as_tensor(prior_scores).detach().cpu(), dtype=np.float64).reshape(-1)
    n_c = scores.shape[0]
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if training and gt is None:
        raise ValueError("training-mode sampling needs the ground-truth class")
    if gt is not None and not 0 <= gt < n_c:
        raise ValueError(f"ground-truth class {gt} outside [0, {n_c})")
    gt_index = gt if training else None

    if M >= n_c:
        idx = list(range(n_c))
        noise_applied = False
    else:
        if training:
            rng = np.random.default_rng(rng_seed)
            scores = scores + rng.uniform(0.0, noise_high, size=n_c)
        chosen = top_m(scores, M)
        if training and gt not in chosen:
            # chosen is ordered by descending perturbed score; the last slot is the weakest
            chosen[-1] = gt
        idx = sorted(int(i) for i in chosen)
        noise_applied = training
    return SampledVocabulary(idx, text_embeddings[idx], noise_applied, gt_index)


def scatter_logits(logits: torch.Tensor, indices: Sequence[int], n_classes: int) -> torch.Tensor:
    """Map logits over I_M back to the full vocabulary; unsampled classes get -inf."""
    out = torch.full((*logits.shape[:-1], n_classes), float("-inf"), dtype=logits.dtype)
    out[..., list(indices)] = logits
    return out
