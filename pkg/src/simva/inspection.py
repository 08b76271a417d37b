"""Read-only summaries of containers and dumps of intermediate volumes."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .config import Config
from .features import TextEmbeddingSet
from .harness import FeatureSet
from .model import SimVA
from .store import load_container, save_container


class UnknownKeyError(KeyError):
    def __init__(self, key: str, available: list[str]):
        self.key, self.available = key, available
        super().__init__(key)

    def __str__(self) -> str:
        return f"unknown key {self.key!r}; available keys: {', '.join(self.available)}"


def summarize(arrays: dict[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype), "norm": float(np.linalg.norm(v)),
             "min": float(v.min()) if v.size else 0.0, "max": float(v.max()) if v.size else 0.0}
            for k, v in arrays.items()]


def format_summary(rows: list[dict], metadata: dict | None = None) -> str:
    lines = [f"{k}: {v}" for k, v in (metadata or {}).items()]
    width = max([len(r["name"]) for r in rows] + [4])
    lines.append(f"{'name':{width}s}  {'shape':18s} {'dtype':8s} {'norm':>12s}")
    for r in rows:
        lines.append(f"{r['name']:{width}s}  {str(tuple(r['shape'])):18s} {r['dtype']:8s} {r['norm']:12.6g}")
    total = sum(int(np.prod(r["shape"])) for r in rows)
    lines.append(f"{len(rows)} arrays, {total} scalars")
    return "\n".join(lines)


def read_array(path: str | Path, key: str) -> np.ndarray:
    arrays, _, _ = load_container(path)
    if key not in arrays:
        raise UnknownKeyError(key, list(arrays))
    return arrays[key]


@torch.no_grad()
def volume_slices(model: SimVA, fs: FeatureSet, texts: TextEmbeddingSet, index: int) -> dict[str, np.ndarray]:
    """S, Z_0 and per-layer gamma / Z_ta for one clip, evaluated in eval mode."""
    if not 0 <= index < len(fs):
        raise IndexError(f"clip index {index} outside [0, {len(fs)})")
    model.eval()
    sl = slice(index, index + 1)
    out = model.forward_batch(fs.patch[sl], fs.cls[sl], texts.embeddings, keep_trace=True)
    tr = out.trace
    arrays = {"S": tr["S"][0], "z0": tr["z0"][0]}
    for i, z in enumerate(tr["z_ta"]):
        if "motion" in tr:
            fld = tr["motion"][i]
            arrays[f"layers.{i}.r"] = fld.centered[0]
            arrays[f"layers.{i}.gamma"] = fld.gain[0]
        arrays[f"layers.{i}.z_ta"] = z[0]
    arrays["logits"] = out.logits[0]
    return {k: v.detach().cpu().numpy() for k, v in arrays.items()}


def dump_volumes(path: str | Path, model: SimVA, cfg: Config, fs: FeatureSet, texts: TextEmbeddingSet,
                 index: int) -> dict[str, np.ndarray]:
    arrays = volume_slices(model, fs, texts, index)
    meta = {"kind": "volume_dump", "clip_id": fs.clip_ids[index], "label": int(fs.labels[index]),
            "class_names": list(texts.class_names)}
    save_container(path, arrays, config=cfg.to_dict(), metadata=meta)
    return arrays
