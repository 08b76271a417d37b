"""Weight-space ensembling between a base and a fine-tuned ParameterStore."""

from __future__ import annotations

from .store import ParameterStore, StructureError


def wse_blend(base: ParameterStore, tuned: ParameterStore, beta: float = 0.8,
              prefix: str | tuple[str, ...] | None = None) -> ParameterStore:
    """(1 - beta) * base + beta * tuned, array by array.

    With ``prefix`` only matching names are blended; everything else is taken
    from ``tuned`` (e.g. blend encoder weights, keep the fine-tuned head).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    only_base = [k for k in base.names() if k not in tuned]
    only_tuned = [k for k in tuned.names() if k not in base]
    bad_shape = [k for k in base.names() if k in tuned and base[k].shape != tuned[k].shape]
    if only_base or only_tuned or bad_shape:
        raise StructureError(f"stores differ: only in base {only_base}, only in tuned {only_tuned}, "
                             f"shape mismatch {bad_shape}")
    prefixes = (prefix,) if isinstance(prefix, str) else prefix
    out = []
    for name, a in base.items():
        b = tuned[name]
        if prefixes is not None and not name.startswith(prefixes):
            out.append((name, b.copy()))
        elif beta == 0.0:
            out.append((name, a.copy()))
        elif beta == 1.0:
            out.append((name, b.copy()))
        else:
            out.append((name, ((1.0 - beta) * a + beta * b).astype(a.dtype)))
    meta = {"wse_beta": beta, "wse_base": base.digest(), "wse_tuned": tuned.digest(),
            "wse_prefix": list(prefixes) if prefixes else None}
    return ParameterStore(out, metadata=meta, config=tuned.config)
