"""Parameter counts of the aggregation head across volume widths and depths."""

from __future__ import annotations

import argparse

from simva.config import ModelConfig
from simva.model import param_count, per_layer_count


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d-f", type=int, nargs="+", default=[32, 64, 128])
    ap.add_argument("--layers", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--breakdown", action="store_true", help="per-module counts for the default config")
    args = ap.parse_args()

    print(f"{'d_f':>5s} {'N_L':>4s} {'per layer':>10s} {'total':>10s}")
    for d in args.d_f:
        for n in args.layers:
            cfg = ModelConfig(d_f=d, N_L=n)
            print(f"{d:5d} {n:4d} {per_layer_count(cfg):10d} {param_count(cfg)[0]:10d}")
    if args.breakdown:
        total, parts = param_count(ModelConfig())
        print()
        for name, n in parts.items():
            print(f"{name:16s} {n:8d}")
        print(f"{'total':16s} {total:8d}")


if __name__ == "__main__":
    main()
