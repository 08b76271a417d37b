"""Command line entry point: ``simva train|eval|gradcheck|wse|inspect|plot``."""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import ExitStack
from pathlib import Path

import torch

from .config import PROTOCOL_DEFAULTS, Config, ConfigError, apply_overrides, load_config
from .store import ParameterStore

PROTOCOLS = ("zero_shot", "few_shot", "base_to_novel")


class CLIError(RuntimeError):
    pass


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args, protocol: str | None = None) -> Config:
    """Protocol preset, then the config file, then --set, then --seed and --desk-scale."""
    cfg = Config()
    if protocol:
        apply_overrides(cfg, PROTOCOL_DEFAULTS[protocol])
    cfg = load_config(args.config, _parse_sets(args.set), base=cfg)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.desk_scale is not None:
        if args.desk_scale <= 0:
            raise ConfigError("--desk-scale must be positive")
        cfg.train.epochs = max(1, round(cfg.train.epochs * args.desk_scale)) if cfg.train.epochs else 0
    return cfg


def _metrics_sink(stack: ExitStack, path: str | None):
    if path is None or path == "-":
        return sys.stdout
    return stack.enter_context(open(path, "w"))


def cmd_train(args) -> int:
    from . import harness

    cfg = resolve_config(args, args.protocol)
    init = ParameterStore.load(args.init) if args.init else None
    texts = harness.build_texts(cfg)
    data = harness.build_features(cfg, "train")
    meta = {}
    if args.shots is not None:
        data = data.subset(harness.few_shot_indices(data.labels, args.shots, cfg.train.seed))
        meta = {"shots": args.shots, "split_seed": cfg.train.seed}
    with ExitStack() as stack:
        sink = _metrics_sink(stack, args.metrics_out)
        res = harness.train(cfg, data, texts, init=init, sink=sink, **meta)
    res.store.save(args.out)
    print(json.dumps({"checkpoint": str(args.out), "steps": res.steps, "digest": res.store.digest()}),
          file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from . import harness

    cfg = resolve_config(args, args.protocol)
    store = ParameterStore.load(args.checkpoint) if args.checkpoint else None
    if store is None and args.protocol == "zero_shot":
        raise CLIError("zero_shot evaluation needs --checkpoint")
    with ExitStack() as stack:
        sink = _metrics_sink(stack, args.metrics_out) if args.metrics_out else None
        res = harness.run_protocol(cfg, args.protocol, store=store, shots=args.shots,
                                   shuffle_frames=args.shuffle_frames, sink=sink)
    if args.out and res.store is not None and args.protocol != "zero_shot":
        res.store.save(args.out)
    print(json.dumps(res.metrics))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck, tiny_config

    cfg = tiny_config()
    cfg = load_config(args.config, _parse_sets(args.set), base=cfg)
    report = gradcheck(cfg, seed=args.seed or 0, eps=args.eps, tolerance=args.tol, samples=args.samples)
    print(report.format())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))
    if not report.passed:
        raise CLIError(f"gradient check failed for: {', '.join(report.failing)}")
    return 0


def cmd_wse(args) -> int:
    from .wse import wse_blend

    out = wse_blend(ParameterStore.load(args.base), ParameterStore.load(args.tuned), args.beta,
                    prefix=tuple(args.prefix) if args.prefix else None)
    out.save(args.out)
    print(json.dumps({"out": str(args.out), "beta": args.beta, "digest": out.digest()}))
    return 0


def cmd_inspect(args) -> int:
    from .inspection import dump_volumes, format_summary, read_array, summarize
    from .store import load_container

    if args.dump:
        from . import harness

        store = ParameterStore.load(args.path)
        cfg = resolve_config(args) if args.config or args.set else _config_of(store)
        model = harness.model_from_store(cfg, store)
        fs = harness.build_features(cfg, args.split)
        arrays = dump_volumes(args.dump, model, cfg, fs, harness.build_texts(cfg), args.clip)
        print(format_summary(summarize(arrays), {"dump": args.dump, "clip_id": fs.clip_ids[args.clip]}))
        return 0
    if args.key:
        arr = read_array(args.path, args.key)
        print(json.dumps(summarize({args.key: arr})[0]))
        if args.values:
            print(json.dumps(arr.tolist()))
        return 0
    arrays, config, meta = load_container(args.path)
    print(format_summary(summarize(arrays), meta))
    return 0


def _config_of(store: ParameterStore) -> Config:
    from .config import config_from_dict

    if not store.config:
        raise CLIError("checkpoint carries no config; pass --config")
    return config_from_dict(store.config)


def cmd_plot(args) -> int:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise CLIError("plotting needs matplotlib (pip install 'simva[plot]')") from None
    rows = [json.loads(line) for line in Path(args.metrics).read_text().splitlines() if line.strip()]
    if not rows:
        raise CLIError(f"no records in {args.metrics}")
    steps = [r["step"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, [r["loss_agg"] for r in rows], label="loss_agg")
    ax1.set_xlabel("step")
    ax1.legend()
    ax2.plot(steps, [r["top1"] for r in rows], label="top1")
    ax2.plot(steps, [r["top5"] for r in rows], label="top5")
    ax2.set_xlabel("step")
    ax2.set_ylim(0, 101)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    return 0


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="key=value or JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", required=out_required)
    p.add_argument("--metrics-out", help="JSON-lines metrics file ('-' for stdout)")
    p.add_argument("--desk-scale", type=float, help="multiply the epoch schedule by this factor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simva", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the aggregation stack on the synthetic dataset")
    _common(p, out_required=True)
    p.add_argument("--protocol", choices=PROTOCOLS, help="apply this protocol's schedule preset")
    p.add_argument("--shots", type=int, help="train on K clips per class")
    p.add_argument("--init", help="start from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate under a protocol")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--protocol", choices=PROTOCOLS, default="zero_shot")
    p.add_argument("--shots", type=int)
    p.add_argument("--shuffle-frames", action="store_true", help="permute frames of every test clip")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    _common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("wse", help="blend two checkpoints in weight space")
    p.add_argument("--base", required=True)
    p.add_argument("--tuned", required=True)
    p.add_argument("--beta", type=float, default=0.8)
    p.add_argument("--prefix", action="append", help="blend only arrays with this name prefix")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_wse)

    p = sub.add_parser("inspect", help="summarize a container or dump intermediate volumes")
    p.add_argument("path")
    p.add_argument("--key", help="show a single array")
    p.add_argument("--values", action="store_true", help="with --key, print the values too")
    p.add_argument("--dump", metavar="OUT", help="write S, gamma and Z_ta of one clip to OUT")
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--seed", type=int)
    p.add_argument("--desk-scale", type=float)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("plot", help="render loss/accuracy curves from a metrics file")
    p.add_argument("metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2 if not isinstance(exc, CLIError) else 1


if __name__ == "__main__":
    sys.exit(main())
