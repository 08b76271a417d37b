"""Deterministic stand-ins for the image/text encoders and a moving-sprite dataset.

Features are produced in float32; callers cast to float64 for oracle checks.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .store import FormatError, load_container, save_container


class ShapeError(ValueError):
    pass


@dataclass
class VideoClip:
    frames: np.ndarray  # T x H0 x W0 x 3 in [0, 1]
    label: int | None = None
    clip_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"frames must be T x H0 x W0 x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ShapeError("clip needs at least one frame")


@dataclass
class EncodedVideo:
    patch_features: np.ndarray  # T x H x W x D
    cls_tokens: np.ndarray  # T x D
    clip_id: str = ""
    label: int | None = None

    def __post_init__(self):
        pf, cls = self.patch_features, self.cls_tokens
        if pf.ndim != 4 or cls.ndim != 2 or cls.shape != (pf.shape[0], pf.shape[3]):
            raise ShapeError(f"inconsistent shapes patch_features={pf.shape} cls_tokens={cls.shape}")
        if not (np.isfinite(pf).all() and np.isfinite(cls).all()):
            raise ValueError(f"non-finite features in clip {self.clip_id!r}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.patch_features.shape

    def with_frame_order(self, order: Sequence[int]) -> "EncodedVideo":
        order = np.asarray(order)
        return EncodedVideo(self.patch_features[order], self.cls_tokens[order], self.clip_id, self.label)


@dataclass
class TextEmbeddingSet:
    embeddings: np.ndarray  # N_C x D
    class_names: list[str]

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.class_names):
            raise ShapeError(f"embeddings {self.embeddings.shape} vs {len(self.class_names)} names")
        if not np.isfinite(self.embeddings).all():
            raise ValueError("non-finite text embeddings")

    def __len__(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int]) -> "TextEmbeddingSet":
        idx = list(indices)
        return TextEmbeddingSet(self.embeddings[idx], [self.class_names[i] for i in idx])


def _projection(in_dim: int, D: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0x5EED])
    w = rng.standard_normal((in_dim, D)) * (2.0 / np.sqrt(in_dim))
    b = rng.standard_normal(D) * 0.5
    return w, b


def encode_video_stub(clip: VideoClip, D: int = 32, patch: int = 8, seed: int = 0) -> EncodedVideo:
    """Seeded random projection of each pixel patch followed by tanh.

    The CLS token of a frame is the mean patch pixel vector pushed through the
    same projection.
    """
    T, H0, W0, _ = clip.frames.shape
    for name, size in (("H0", H0), ("W0", W0)):
        if size % patch:
            raise ShapeError(f"{name}={size} is not divisible by patch={patch}")
    H, W = H0 // patch, W0 // patch
    x = clip.frames.astype(np.float64) - 0.5
    x = x.reshape(T, H, patch, W, patch, 3).transpose(0, 1, 3, 2, 4, 5).reshape(T, H, W, -1)
    w, b = _projection(patch * patch * 3, D, seed)
    feats = np.tanh(x @ w + b)
    cls = np.tanh(x.mean(axis=(1, 2)) @ w + b)
    return EncodedVideo(feats.astype(np.float32), cls.astype(np.float32), clip.clip_id, clip.label)


def encode_text_stub(class_names: Sequence[str], D: int = 32, seed: int = 0) -> TextEmbeddingSet:
    names = list(class_names)
    if not names:
        raise ValueError("class_names is empty")
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate class names: {dupes}")
    rows = [np.random.default_rng([seed, zlib.crc32(n.encode("utf-8"))]).standard_normal(D)
            for n in names]
    return TextEmbeddingSet(np.stack(rows).astype(np.float32), names)


COMPASS = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)]
COMPASS_NAMES = ["right", "left", "down", "up", "down-right", "up-left", "down-left", "up-right"]


def default_motion_profiles(n_classes: int, speeds: Sequence[float] = (1.0,)) -> list[tuple[float, float]]:
    """Velocities (rows, cols) in patches/frame: compass directions x speeds."""
    profiles = [(s * dy, s * dx) for s in speeds for dy, dx in COMPASS]
    if n_classes > len(profiles):
        raise ValueError(f"only {len(profiles)} distinct motion profiles for speeds {tuple(speeds)}")
    return profiles[:n_classes]


@dataclass
class SyntheticDatasetSpec:
    n_classes: int = 8
    clips_per_class: int = 8
    T: int = 8
    H0: int = 32
    W0: int = 32
    patch: int = 8
    motion_profiles: list[tuple[float, float]] | None = None
    sprite: int = 8
    noise: float = 0.02
    seed: int = 0
    speeds: tuple[float, ...] = (1.0,)
    background: float = 0.3
    align_to_patch: bool = True
    sprite_color: tuple[float, float, float] = (0.95, 0.7, 0.15)

    def profiles(self) -> list[tuple[float, float]]:
        if self.motion_profiles is not None:
            return [tuple(map(float, v)) for v in self.motion_profiles]
        return default_motion_profiles(self.n_classes, self.speeds)

    def class_names(self) -> list[str]:
        names = []
        for dy, dx in self.profiles():
            names.append(f"move dy={dy:+g} dx={dx:+g}")
        return names


def render_sprite_clip(T: int, H0: int, W0: int, start: tuple[int, int], velocity_px: tuple[float, float],
                       sprite: int, color, background: float, noise: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Render a square sprite moving on a torus; every frame shows the same pixel multiset."""
    frames = np.full((T, H0, W0, 3), background, dtype=np.float64)
    tile = np.zeros((H0, W0, 3))
    tile[:sprite, :sprite] = color
    mask = np.zeros((H0, W0, 1))
    mask[:sprite, :sprite] = 1.0
    for t in range(T):
        dy = int(round(start[0] + velocity_px[0] * t)) % H0
        dx = int(round(start[1] + velocity_px[1] * t)) % W0
        m = np.roll(mask, (dy, dx), axis=(0, 1))
        frames[t] = frames[t] * (1 - m) + np.roll(tile, (dy, dx), axis=(0, 1))
    if noise > 0:
        frames += rng.normal(0.0, noise, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)


def make_synthetic_dataset(spec: SyntheticDatasetSpec, split: str = "train") -> list[VideoClip]:
    """Clips whose class is carried only by the sprite's velocity.

    Start positions and noise are random per clip; appearance is shared by all
    classes, so any single frame is uninformative about the label.
    """
    if spec.n_classes < 2:
        raise ValueError(f"need n_classes >= 2, got {spec.n_classes}")
    if spec.clips_per_class < 1:
        raise ValueError("clips_per_class must be >= 1")
    profiles = spec.profiles()
    if len(profiles) != spec.n_classes:
        raise ValueError(f"{len(profiles)} motion profiles for {spec.n_classes} classes")
    split_id = zlib.crc32(split.encode())
    clips = []
    for c, (vy, vx) in enumerate(profiles):
        for k in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.seed, split_id, c, k])
            if spec.align_to_patch:
                start = (int(rng.integers(spec.H0 // spec.patch)) * spec.patch,
                         int(rng.integers(spec.W0 // spec.patch)) * spec.patch)
            else:
                start = (int(rng.integers(spec.H0)), int(rng.integers(spec.W0)))
            frames = render_sprite_clip(spec.T, spec.H0, spec.W0, start,
                                        (vy * spec.patch, vx * spec.patch), spec.sprite,
                                        spec.sprite_color, spec.background, spec.noise, rng)
            clips.append(VideoClip(frames, label=c, clip_id=f"{split}-c{c:03d}-{k:03d}"))
    return clips


def uniform_frame_indices(n_frames: int, T: int) -> np.ndarray:
    """Centers of T equal segments over n_frames (single temporal view)."""
    if n_frames < 1 or T < 1:
        raise ValueError("need n_frames >= 1 and T >= 1")
    edges = np.linspace(0, n_frames, T + 1)
    return np.minimum(((edges[:-1] + edges[1:]) / 2).astype(int), n_frames - 1)


def save_features(path: str | Path, obj: EncodedVideo | TextEmbeddingSet) -> None:
    if isinstance(obj, EncodedVideo):
        meta = {"kind": "encoded_video", "clip_id": obj.clip_id, "label": obj.label}
        arrays = {"patch_features": obj.patch_features, "cls_tokens": obj.cls_tokens}
    elif isinstance(obj, TextEmbeddingSet):
        meta = {"kind": "text_embeddings", "class_names": list(obj.class_names)}
        arrays = {"embeddings": obj.embeddings}
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    save_container(path, arrays, metadata=meta)


def load_features(path: str | Path) -> EncodedVideo | TextEmbeddingSet:
    arrays, _, meta = load_container(path)
    kind = meta.get("kind")
    try:
        if kind == "encoded_video":
            return EncodedVideo(arrays["patch_features"], arrays["cls_tokens"],
                                meta.get("clip_id", ""), meta.get("label"))
        if kind == "text_embeddings":
            return TextEmbeddingSet(arrays["embeddings"], list(meta["class_names"]))
    except KeyError as exc:
        raise FormatError(f"{kind} file is missing array {exc}") from None
    except ShapeError as exc:
        raise FormatError(f"{kind} file has inconsistent arrays: {exc}") from None
    raise FormatError(f"unknown feature kind {kind!r}")
