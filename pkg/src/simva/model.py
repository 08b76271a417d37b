"""The full similarity-volume aggregation model and its parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .features import EncodedVideo, TextEmbeddingSet
from .head import Head, LossReport, gt_positions, total_loss
from .motion import MotionField, MotionModulator, modulate
from .sampler import GlobalAlignment, global_alignment, sample_classes
from .similarity import KERNEL, VolumeEmbedding, cosine_volume
from .spatial import SpatialAggregator
from .temporal import TemporalAggregator


class AggregationLayer(nn.Module):
    """Spatial aggregation -> motion modulation -> temporal scan."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.sa = SpatialAggregator(cfg.d_f, cfg.heads(), cfg.window(), cfg.H, cfg.W,
                                    cfg.sa.mlp_ratio, cfg.sa.use_rel_pos_bias)
        self.motion = (MotionModulator(cfg.D, cfg.d_f, cfg.motion.alpha, cfg.motion.init_std)
                       if cfg.motion.enabled else None)
        t = cfg.ta
        self.ta = TemporalAggregator(cfg.d_f, state_dim=t.state_dim, expand=t.expand,
                                     dt_rank=cfg.dt_rank(), conv_kernel=t.conv_kernel,
                                     dt_min=t.dt_min, dt_max=t.dt_max)

    def forward(self, z: torch.Tensor, patch: torch.Tensor, trace: dict | None = None) -> torch.Tensor:
        z = self.sa(z)
        if self.motion is not None:
            fld = self.motion(patch)
            z = modulate(z, fld.gain)
            if trace is not None:
                trace.setdefault("motion", []).append(fld)
        z = self.ta(z)
        if trace is not None:
            trace.setdefault("z_ta", []).append(z)
        return z


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, M)
    indices: list[list[int]]  # per-clip I_M
    alignment: GlobalAlignment
    report: LossReport | None = None
    trace: dict = field(default_factory=dict)


def sampler_seed(seed: int, item: int) -> int:
    return int(np.random.SeedSequence([seed, item]).generate_state(1)[0])


class SimVA(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = VolumeEmbedding(cfg.d_f)
        self.layers = nn.ModuleList([AggregationLayer(cfg) for _ in range(cfg.N_L)])
        self.head = Head(cfg.d_f)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.conv.kernel.dtype

    def select(self, prior: torch.Tensor, text: torch.Tensor, labels, training: bool, seed: int):
        """Per-clip candidate vocabularies; returns (indices, restricted text (B, M, D) or (N_C, D))."""
        n_c = text.shape[0]
        s = self.cfg.sampler
        if not s.enabled or s.M >= n_c:
            return [list(range(n_c))] * prior.shape[0], text
        indices = []
        for b in range(prior.shape[0]):
            gt = None if labels is None else int(labels[b])
            voc = sample_classes(prior[b], text, s.M, training, gt,
                                 rng_seed=sampler_seed(seed, b), noise_high=s.noise_high)
            indices.append(voc.indices)
        return indices, text[torch.tensor(indices)]

    def forward_batch(self, patch, cls, text, labels=None, training: bool = False, seed: int = 0,
                      keep_trace: bool = False) -> ForwardOutput:
        """patch (B, T, H, W, D), cls (B, T, D), text (N_C, D), labels (B,) class ids."""
        dt = self.dtype
        patch = torch.as_tensor(patch).to(dt)
        cls = torch.as_tensor(cls).to(dt)
        text = torch.as_tensor(text).to(dt)
        if training and labels is None:
            raise ValueError("training forward needs labels")
        align = global_alignment(cls, text)
        indices, text_sel = self.select(align.prior_scores.detach(), text, labels, training, seed)
        trace: dict | None = {} if keep_trace else None
        sim = cosine_volume(patch, text_sel)
        z = self.embed(sim)
        if trace is not None:
            trace["S"] = sim
            trace["z0"] = z
        for layer in self.layers:
            z = layer(z, patch, trace)
        logits = self.head(z)
        out = ForwardOutput(logits, indices, align, trace=trace or {})
        if labels is not None:
            labels_t = torch.as_tensor(labels, dtype=torch.long)
            pos = gt_positions(indices, labels_t.tolist())
            out.report = total_loss(logits, pos, align.prior_scores, labels_t,
                                    self.cfg.head.tau_agg, self.cfg.head.tau_cls)
        return out

    def forward(self, video: EncodedVideo, texts: TextEmbeddingSet, gt: int | None = None,
                training: bool = False, seed: int = 0):
        """Single clip. Training returns a LossReport; eval returns logits over I_M."""
        out = self.forward_batch(video.patch_features[None], video.cls_tokens[None], texts.embeddings,
                                 None if gt is None else [gt], training, seed)
        if training:
            return out.report
        return out.logits[0]


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> SimVA:
    torch.manual_seed(seed)
    model = SimVA(cfg)
    return model.to(dtype)


def _swin_block_count(cfg: ModelConfig) -> int:
    d, r, w, h = cfg.d_f, cfg.sa.mlp_ratio, cfg.window(), cfg.heads()
    n = 4 * d  # two LayerNorms
    n += d * 3 * d + 3 * d  # qkv
    n += d * d + d  # proj
    n += d * r * d + r * d + r * d * d + d  # mlp
    if cfg.sa.use_rel_pos_bias:
        n += (2 * w - 1) ** 2 * h
    return n


def _motion_count(cfg: ModelConfig) -> int:
    if not cfg.motion.enabled:
        return 0
    return 3 * 3 * 2 * cfg.D * 2 + 2 + 2 * cfg.d_f + cfg.d_f


def _temporal_count(cfg: ModelConfig) -> int:
    d, t = cfg.d_f, cfg.ta
    E, N, R, k = t.expand * d, t.state_dim, cfg.dt_rank(), t.conv_kernel
    return (d  # rms scale
            + d * 2 * E  # in_proj
            + E * k + E  # depthwise conv
            + E * (R + 2 * N)  # x_proj
            + R * E + E  # dt_proj
            + E * N  # A_log
            + E  # D skip
            + E * d)  # out_proj


def param_count(cfg: ModelConfig) -> tuple[int, dict[str, int]]:
    """Analytic parameter count with a per-module breakdown."""
    layer = {"sa": 2 * _swin_block_count(cfg), "motion": _motion_count(cfg), "ta": _temporal_count(cfg)}
    breakdown = {"embed": KERNEL * KERNEL * cfg.d_f + cfg.d_f}
    for i in range(cfg.N_L):
        for k, v in layer.items():
            breakdown[f"layers.{i}.{k}"] = v
    breakdown["head"] = cfg.d_f + 1
    return sum(breakdown.values()), breakdown


def per_layer_count(cfg: ModelConfig) -> int:
    return 2 * _swin_block_count(cfg) + _motion_count(cfg) + _temporal_count(cfg)
