"""Desk-scale sweep over one config key (volume width d_f by default).

    python3 scripts/ablate.py --key model.d_f --values 8 16 32 --max-steps 150
    python3 scripts/ablate.py --key model.N_L --values 0 1 2
    python3 scripts/ablate.py --key model.motion.enabled --values true false
"""

from __future__ import annotations

import argparse
import json

import torch

from simva import harness
from simva.config import load_config, set_key
from simva.model import param_count


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.txt")
    ap.add_argument("--key", default="model.d_f")
    ap.add_argument("--values", nargs="+", default=["8", "16", "32"])
    ap.add_argument("--max-steps", type=int, default=150)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    torch.set_num_threads(1)

    rows = []
    for value in args.values:
        for seed in args.seeds:
            cfg = load_config(args.config)
            set_key(cfg, args.key, value)
            cfg.train.max_steps = args.max_steps
            cfg.train.seed = seed
            texts = harness.build_texts(cfg)
            train_set, test_set = harness.build_features(cfg, "train"), harness.build_features(cfg, "test")
            res = harness.train(cfg, train_set, texts)
            row = {args.key: value, "seed": seed, "params": param_count(cfg.model)[0],
                   "train": harness.evaluate_store(cfg, res.store, train_set, texts)["top1"],
                   "test": harness.evaluate_store(cfg, res.store, test_set, texts)["top1"],
                   "shuffled": harness.evaluate_store(cfg, res.store, test_set.shuffle_frames(seed), texts)["top1"]}
            rows.append(row)
            print(json.dumps(row), flush=True)

    print(f"\n{args.key:>22s} {'seed':>5s} {'params':>8s} {'train':>7s} {'test':>7s} {'shuffled':>9s}")
    for r in rows:
        print(f"{r[args.key]:>22s} {r['seed']:5d} {r['params']:8d} {r['train']:7.1f} {r['test']:7.1f} "
              f"{r['shuffled']:9.1f}")


if __name__ == "__main__":
    main()
