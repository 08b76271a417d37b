"""Training loop, evaluation protocols and the metrics stream."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np
import torch

from .config import Config, ConfigError, DataConfig
from .features import (EncodedVideo, SyntheticDatasetSpec, TextEmbeddingSet, encode_text_stub,
                       encode_video_stub, make_synthetic_dataset)
from .model import SimVA, build_model, sampler_seed
from .sampler import scatter_logits
from .store import ParameterStore

DTYPES = {"f32": torch.float32, "f64": torch.float64}


class NonFiniteError(FloatingPointError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass
class MetricsRecord:
    step: int
    loss_agg: float
    loss_cls: float
    top1: float
    top5: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class FeatureSet:
    """A batch-ready stack of encoded clips."""

    patch: np.ndarray  # (N, T, H, W, D)
    cls: np.ndarray  # (N, T, D)
    labels: np.ndarray  # (N,)
    clip_ids: list[str]

    @classmethod
    def from_encoded(cls, videos: Sequence[EncodedVideo]) -> "FeatureSet":
        if not videos:
            raise ValueError("empty clip list")
        if any(v.label is None for v in videos):
            raise ValueError("every clip needs a label")
        return cls(np.stack([v.patch_features for v in videos]), np.stack([v.cls_tokens for v in videos]),
                   np.array([v.label for v in videos], dtype=np.int64), [v.clip_id for v in videos])

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: Sequence[int]) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.patch[idx], self.cls[idx], self.labels[idx], [self.clip_ids[i] for i in idx])

    def relabel(self, mapping: dict[int, int]) -> "FeatureSet":
        return FeatureSet(self.patch, self.cls, np.array([mapping[int(y)] for y in self.labels]), self.clip_ids)

    def shuffle_frames(self, seed: int = 0) -> "FeatureSet":
        """Independent random frame permutation per clip (never the identity when T > 1)."""
        patch, cls = self.patch.copy(), self.cls.copy()
        T = patch.shape[1]
        for i in range(len(self)):
            rng = np.random.default_rng([seed, i])
            order = rng.permutation(T)
            while T > 1 and (order == np.arange(T)).all():
                order = rng.permutation(T)
            patch[i], cls[i] = patch[i][order], cls[i][order]
        return FeatureSet(patch, cls, self.labels.copy(), list(self.clip_ids))


def dataset_spec(data: DataConfig, split: str) -> SyntheticDatasetSpec:
    per_class = data.clips_per_class if split == "train" else data.test_clips_per_class
    return SyntheticDatasetSpec(n_classes=data.n_classes, clips_per_class=per_class, T=data.T, H0=data.H0,
                                W0=data.W0, patch=data.patch, sprite=data.sprite, noise=data.noise,
                                seed=data.seed, speeds=tuple(data.speeds))


def check_shapes(cfg: Config) -> None:
    d, m = cfg.data, cfg.model
    want = {"T": d.T, "H": d.H0 // d.patch, "W": d.W0 // d.patch, "D": d.D}
    bad = {k: (getattr(m, k), v) for k, v in want.items() if getattr(m, k) != v}
    if bad:
        desc = ", ".join(f"model.{k}={a} but data gives {b}" for k, (a, b) in bad.items())
        raise ConfigError(f"model and data shapes disagree: {desc}")


def build_features(cfg: Config, split: str = "train") -> FeatureSet:
    check_shapes(cfg)
    clips = make_synthetic_dataset(dataset_spec(cfg.data, split), split)
    return FeatureSet.from_encoded([encode_video_stub(c, D=cfg.data.D, patch=cfg.data.patch,
                                                      seed=cfg.data.seed) for c in clips])


def build_texts(cfg: Config) -> TextEmbeddingSet:
    return encode_text_stub(dataset_spec(cfg.data, "train").class_names(), D=cfg.data.D, seed=cfg.data.seed)


# --- scoring ---------------------------------------------------------------

def topk_correct(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether the label ranks in the top k; ties go to the lower class index, -inf never counts."""
    scores = np.asarray(scores, dtype=np.float64)
    s_y = scores[np.arange(len(labels)), labels][:, None]
    idx = np.arange(scores.shape[1])[None]
    rank = (scores > s_y).sum(1) + ((scores == s_y) & (idx < labels[:, None])).sum(1)
    return np.isfinite(s_y[:, 0]) & (rank < k)


def accuracy(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    labels = np.asarray(labels)
    return {"top1": 100.0 * float(topk_correct(scores, labels, 1).mean()),
            "top5": 100.0 * float(topk_correct(scores, labels, 5).mean()),
            "n": int(len(labels))}


def harmonic_mean(base: float, novel: float) -> float:
    if base < 0 or novel < 0:
        raise ValueError("accuracies must be non-negative")
    if base + novel == 0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


def full_scores(out, n_classes: int) -> torch.Tensor:
    rows = [scatter_logits(out.logits[b], idx, n_classes) for b, idx in enumerate(out.indices)]
    return torch.stack(rows)


@torch.no_grad()
def predict(model: SimVA, fs: FeatureSet, texts: TextEmbeddingSet, batch_size: int = 64,
            seed: int = 0) -> np.ndarray:
    """Eval-mode scores over the full vocabulary, -inf outside each clip's I_M."""
    model.eval()
    out_rows = []
    for s in range(0, len(fs), batch_size):
        sl = slice(s, s + batch_size)
        out = model.forward_batch(fs.patch[sl], fs.cls[sl], texts.embeddings, None, training=False,
                                  seed=sampler_seed(seed, s))
        out_rows.append(full_scores(out, len(texts)).double().numpy())
    return np.concatenate(out_rows)


def model_from_store(cfg: Config, store: ParameterStore | None, seed: int | None = None) -> SimVA:
    model = build_model(cfg.model, seed=cfg.train.seed if seed is None else seed,
                        dtype=DTYPES[cfg.train.dtype])
    if store is not None:
        store.load_into(model)
    return model


# --- training --------------------------------------------------------------

def _first_nonfinite(named: Iterable[tuple[str, torch.Tensor | None]]) -> str | None:
    for name, t in named:
        if t is not None and not torch.isfinite(t).all():
            return name
    return None


def locate_nonfinite(model: SimVA, patch, cls, text, labels, seed: int) -> str:
    """Re-run a forward with tracing and name the first tensor holding inf/nan."""
    with torch.no_grad():
        named = [("input.patch_features", torch.as_tensor(patch)), ("input.cls_tokens", torch.as_tensor(cls)),
                 ("input.text_embeddings", torch.as_tensor(text))]
        named += [(f"param.{n}", p) for n, p in model.named_parameters()]
        hit = _first_nonfinite(named)
        if hit:
            return hit
        out = model.forward_batch(patch, cls, text, labels, training=True, seed=seed, keep_trace=True)
        tr = out.trace
        named = [("S", tr["S"]), ("z0", tr["z0"])]
        for i, z in enumerate(tr.get("z_ta", [])):
            if "motion" in tr:
                named.append((f"layers.{i}.gamma", tr["motion"][i].gain))
            named.append((f"layers.{i}.z_ta", z))
        named += [("logits", out.logits), ("loss_agg", out.report.loss_agg),
                  ("loss_cls", out.report.loss_cls)]
        return _first_nonfinite(named) or "loss (forward values finite; overflow in loss reduction)"


@dataclass
class TrainResult:
    store: ParameterStore
    records: list[MetricsRecord]
    steps: int


def total_steps(cfg: Config, n_clips: int) -> int:
    per_epoch = math.ceil(n_clips / cfg.train.batch_size)
    steps = cfg.train.epochs * per_epoch
    if cfg.train.max_steps is not None:
        steps = min(steps, cfg.train.max_steps)
    return steps


def checkpoint(model: SimVA, cfg: Config, step: int, **extra) -> ParameterStore:
    meta = {"step": step, "config_hash": cfg.digest(), "seed": cfg.train.seed, **extra}
    return ParameterStore.from_module(model, metadata=meta, config=cfg.to_dict())


def train(cfg: Config, data: FeatureSet, texts: TextEmbeddingSet, init: ParameterStore | None = None,
          sink: TextIO | Callable[[MetricsRecord], None] | None = None,
          clock: Callable[[], float] = time.perf_counter, **meta) -> TrainResult:
    """AdamW on the aggregation stack; data order and sampler noise are fixed by ``cfg.train.seed``."""
    tc = cfg.train
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.labels.min() < 0 or data.labels.max() >= len(texts):
        raise ValueError(f"labels outside the {len(texts)}-class vocabulary")
    model = model_from_store(cfg, init)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr_head, weight_decay=tc.weight_decay)
    n_steps = total_steps(cfg, len(data))
    records: list[MetricsRecord] = []
    t0 = clock()
    step = 0
    epoch = 0
    model.train()
    while step < n_steps:
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(data))
        for s in range(0, len(order), tc.batch_size):
            if step >= n_steps:
                break
            b = order[s:s + tc.batch_size]
            labels = data.labels[b]
            seed = sampler_seed(tc.seed, step)
            out = model.forward_batch(data.patch[b], data.cls[b], texts.embeddings, labels, training=True, seed=seed)
            rep = out.report
            if not torch.isfinite(rep.loss_total):
                where = locate_nonfinite(model, data.patch[b], data.cls[b], texts.embeddings, labels, seed)
                raise NonFiniteError(f"non-finite loss at step {step}; first non-finite tensor: {where}")
            opt.zero_grad(set_to_none=True)
            rep.loss_total.backward()
            bad = _first_nonfinite((f"grad.{n}", p.grad) for n, p in model.named_parameters())
            if bad:
                raise NonFiniteError(f"non-finite gradient at step {step}; first non-finite tensor: {bad}")
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            step += 1
            if step % tc.log_every == 0 or step == n_steps:
                acc = accuracy(full_scores(out, len(texts)).detach().double().numpy(), labels)
                rec = MetricsRecord(step, rep.loss_agg.item(), rep.loss_cls.item(), acc["top1"], acc["top5"],
                                    round(clock() - t0, 6))
                records.append(rec)
                if hasattr(sink, "write"):
                    sink.write(rec.to_json() + "\n")
                elif sink is not None:
                    sink(rec)
        epoch += 1
    return TrainResult(checkpoint(model, cfg, step, **meta), records, step)


# --- protocols -------------------------------------------------------------

def few_shot_indices(labels: np.ndarray, K: int, seed: int) -> np.ndarray:
    """Exactly K clips per class, chosen deterministically from ``seed``."""
    if K < 1:
        raise ProtocolError(f"K must be >= 1, got {K}")
    out = []
    for c in np.unique(labels):
        pool = np.flatnonzero(labels == c)
        if K > len(pool):
            raise ProtocolError(f"K={K} exceeds the {len(pool)} clips available for class {int(c)}")
        rng = np.random.default_rng([seed, int(c)])
        out.append(np.sort(rng.choice(pool, size=K, replace=False)))
    return np.concatenate(out)


def base_novel_split(n_classes: int) -> tuple[list[int], list[int]]:
    """First half of the vocabulary is base, the rest novel."""
    if n_classes < 2:
        raise ProtocolError("base-to-novel needs at least two classes")
    n_base = (n_classes + 1) // 2
    return list(range(n_base)), list(range(n_base, n_classes))


def _restrict(fs: FeatureSet, classes: list[int]) -> FeatureSet:
    keep = np.flatnonzero(np.isin(fs.labels, classes))
    return fs.subset(keep).relabel({c: i for i, c in enumerate(classes)})


def evaluate_store(cfg: Config, store: ParameterStore | None, fs: FeatureSet, texts: TextEmbeddingSet,
                   batch_size: int = 64) -> dict[str, float]:
    model = model_from_store(cfg, store)
    return accuracy(predict(model, fs, texts, batch_size, seed=cfg.train.seed), fs.labels)


@dataclass
class ProtocolResult:
    metrics: dict
    store: ParameterStore | None = None
    records: list[MetricsRecord] | None = None


def run_protocol(cfg: Config, protocol: str, store: ParameterStore | None = None, shots: int | None = None,
                 shuffle_frames: bool = False, sink=None, clock=time.perf_counter) -> ProtocolResult:
    """zero_shot evaluates ``store`` as is; few_shot and base_to_novel fine-tune from it first."""
    texts = build_texts(cfg)
    test = build_features(cfg, "test")
    if shuffle_frames:
        test = test.shuffle_frames(cfg.train.seed)
    if protocol == "zero_shot":
        m = evaluate_store(cfg, store, test, texts)
        return ProtocolResult({"protocol": protocol, **m, "shuffled": shuffle_frames}, store)
    train_set = build_features(cfg, "train")
    if protocol == "few_shot":
        if shots is None:
            raise ProtocolError("few_shot needs a shot count K")
        train_set = train_set.subset(few_shot_indices(train_set.labels, shots, cfg.train.seed))
        res = train(cfg, train_set, texts, init=store, sink=sink, clock=clock, protocol=protocol, shots=shots)
        m = evaluate_store(cfg, res.store, test, texts)
        return ProtocolResult({"protocol": protocol, "shots": shots, "split_seed": cfg.train.seed, **m,
                               "shuffled": shuffle_frames}, res.store, res.records)
    if protocol == "base_to_novel":
        base, novel = base_novel_split(len(texts))
        res = train(cfg, _restrict(train_set, base), texts.subset(base), init=store, sink=sink, clock=clock,
                    protocol=protocol)
        mb = evaluate_store(cfg, res.store, _restrict(test, base), texts.subset(base))
        mn = evaluate_store(cfg, res.store, _restrict(test, novel), texts.subset(novel))
        hm = harmonic_mean(mb["top1"], mn["top1"])
        return ProtocolResult({"protocol": protocol, "base": mb["top1"], "novel": mn["top1"], "hm": hm,
                               "shuffled": shuffle_frames}, res.store, res.records)
    raise ProtocolError(f"unknown protocol {protocol!r}; choose zero_shot, few_shot or base_to_novel")
