"""Central-difference gradient check of the full forward pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .config import Config, apply_overrides
from .model import SimVA, build_model

TINY = {
    "model.D": 16, "model.d_f": 8, "model.N_L": 2, "model.T": 4, "model.H": 4, "model.W": 4,
    "model.sa.window": 2, "model.ta.state_dim": 4, "model.sampler.M": 5, "model.sampler.enabled": True,
    "data.n_classes": 8, "data.D": 16, "data.T": 4, "data.H0": 16, "data.W0": 16, "data.patch": 4,
    "train.dtype": "f64",
}


def tiny_config(**overrides) -> Config:
    """T=4, 4x4 grid, M=5 of 8 classes, d_f=8, two layers, window 2 so the shift mask is active."""
    cfg = apply_overrides(Config(), TINY)
    return apply_overrides(cfg, overrides)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from amplifying round-off."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class ArrayCheck:
    name: str
    shape: tuple[int, ...]
    n_checked: int
    max_rel_err: float
    max_abs_err: float
    passed: bool


@dataclass
class GradcheckReport:
    arrays: list[ArrayCheck]
    eps: float
    tolerance: float
    floor: float

    @property
    def failing(self) -> list[str]:
        return [a.name for a in self.arrays if not a.passed]

    @property
    def passed(self) -> bool:
        return not self.failing

    @property
    def max_rel_err(self) -> float:
        return max((a.max_rel_err for a in self.arrays), default=0.0)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "eps": self.eps, "tolerance": self.tolerance, "floor": self.floor,
                "max_rel_err": self.max_rel_err, "failing": self.failing,
                "arrays": [asdict(a) for a in self.arrays]}

    def format(self) -> str:
        lines = [f"{'array':48s} {'shape':>16s} {'n':>5s} {'max rel':>10s} {'max abs':>10s}"]
        for a in self.arrays:
            flag = "" if a.passed else "  FAIL"
            lines.append(f"{a.name:48s} {str(a.shape):>16s} {a.n_checked:5d} "
                         f"{a.max_rel_err:10.2e} {a.max_abs_err:10.2e}{flag}")
        return "\n".join(lines)


def check_gradients(model: torch.nn.Module, loss_fn: Callable[[], torch.Tensor], eps: float = 1e-5,
                    tolerance: float = 1e-4, samples: int = 64, seed: int = 0, floor: float = 1e-6,
                    names: Sequence[str] | None = None) -> GradcheckReport:
    """Compare autograd gradients with (L(θ+ε) − L(θ−ε)) / 2ε on sampled scalars of each array."""
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for n, p in params.items()}
    rng = np.random.default_rng(seed)
    results = []
    for name in names if names is not None else params:
        p = params[name]
        flat = p.data.view(-1)
        k = min(samples, flat.numel())
        picks = rng.choice(flat.numel(), size=k, replace=False)
        num = np.empty(k)
        with torch.no_grad():
            for j, i in enumerate(picks):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                num[j] = (up - down) / (2 * eps)
        ana = analytic[name].view(-1)[torch.as_tensor(picks)].double().numpy()
        rel = relative_error(ana, num, floor)
        results.append(ArrayCheck(name, tuple(p.shape), k, float(rel.max()), float(np.abs(ana - num).max()),
                                  bool(rel.max() <= tolerance)))
    return GradcheckReport(results, eps, tolerance, floor)


def perturb_parameters(model: torch.nn.Module, scale: float, seed: int) -> None:
    """Move away from the near-identity init so every path carries a visible gradient."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def gradcheck_problem(cfg: Config, seed: int = 0, batch: int = 2,
                      perturb: float = 0.3) -> tuple[SimVA, Callable[[], torch.Tensor]]:
    """A float64 model at a random parameter point and a closure for its training loss.

    The closure returns L_agg. L_cls depends on the fixed features only, so it adds
    no parameter gradient, but at tau_cls=0.01 it dominates the loss magnitude and
    with it the round-off in the central difference.
    """
    model = build_model(cfg.model, seed=seed, dtype=torch.float64)
    perturb_parameters(model, perturb, seed + 1)
    m = cfg.model
    rng = np.random.default_rng(seed)
    patch = rng.standard_normal((batch, m.T, m.H, m.W, m.D))
    cls = rng.standard_normal((batch, m.T, m.D))
    text = rng.standard_normal((cfg.data.n_classes, m.D))
    labels = rng.integers(cfg.data.n_classes, size=batch)

    def loss_fn() -> torch.Tensor:
        return model.forward_batch(patch, cls, text, labels, training=True, seed=seed).report.loss_agg

    return model, loss_fn


def gradcheck(cfg: Config | None = None, seed: int = 0, eps: float = 1e-5, tolerance: float = 1e-4,
              samples: int = 64, names: Sequence[str] | None = None) -> GradcheckReport:
    cfg = cfg or tiny_config()
    model, loss_fn = gradcheck_problem(cfg, seed)
    return check_gradients(model, loss_fn, eps, tolerance, samples, seed, names=names)
