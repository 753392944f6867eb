"""Command line entry point: ``dckd {run,ablate,compare,eval,gen-corpus}``.

Run directories are created under ``$DCKD_RUNS`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import experiments
from .config import get, load_config, parse_value
from .data import make_toy_corpus, save_corpus, synth_pair, load_corpus
from .errors import ConfigError, DCKDError, NonFiniteLossError
from .models import load_checkpoint
from .trainer import build_dataset, evaluate_model

log = logging.getLogger("dckd")


def _config(args):
    return load_config(args.config, args.set or ())


def cmd_run(args):
    cfg = _config(args)
    res = experiments.run_experiment(cfg, run_dir=args.out)
    m = res["metrics"]
    print(f"run dir: {res['run_dir']}")
    for name, s in m.items():
        print(f"{name:>13}: PSNR {s['psnr']:.2f} dB  SSIM {s['ssim']:.4f}")
    return 0


def _parse_axis(text):
    key, _, values = text.partition("=")
    if not values:
        raise ConfigError(f"axis {text!r} is not of the form key=v1,v2,...")
    return key.strip(), [parse_value(v.strip()) for v in values.split(",")]


def cmd_ablate(args):
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [get(cfg, "seed")]
    if args.grid:
        base = experiments.NAMED_GRIDS[args.grid]
        grid = experiments.ExperimentGrid(base.name, base.axes, base.mode, seeds)
    elif args.axis:
        grid = experiments.ExperimentGrid(args.name, [_parse_axis(a) for a in args.axis], args.mode, seeds)
    else:
        raise ConfigError("ablate needs --grid or at least one --axis")
    cells = grid.expand(cfg)
    print(f"grid {grid.name}: {len(cells)} cells x {len(seeds)} seeds")
    for i, c in enumerate(cells):
        print(f"  cell {i}: {c}")
    res = experiments.ablate(grid, cfg, out_dir=args.out)
    print(res["table"])
    print(f"results: {res['out_dir'] / 'results.csv'}")
    return 1 if res["failed"] else 0


def cmd_compare(args):
    if args.methods:
        cfg = _config(args)
        named = [(m, experiments.apply_overrides(cfg, experiments.METHOD_PRESETS[m])) for m in args.methods.split(",")]
    else:
        paths = args.configs
        if len(paths) < 2:
            raise ConfigError("compare needs at least two config files (or --methods)")
        named = [(Path(p).stem, load_config(p, args.set or ())) for p in paths]
    res = experiments.compare(named, out_dir=args.out)
    print(res["table"])
    return 0


def cmd_eval(args):
    cfg = _config(args)
    model, meta = load_checkpoint(args.checkpoint)
    if args.corpus:
        pairs = [synth_pair(img, model.spec.upscale) for img in load_corpus(args.corpus)]
    else:
        pairs = [synth_pair(img, get(cfg, "data.scale")) for img in build_dataset(cfg, "eval")]
    scores = evaluate_model(model, pairs, args.mode or get(cfg, "eval.channel_mode"))
    print(f"{args.checkpoint}: PSNR {scores['psnr']:.2f} dB  SSIM {scores['ssim']:.4f}")
    return 0


def cmd_gen_corpus(args):
    images = make_toy_corpus(args.seed, args.count, args.size)
    out = save_corpus(images, args.out, {"seed": args.seed, "count": args.count, "size": args.size})
    print(f"wrote {len(images)} images to {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dckd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, positional=True):
        if positional:
            sp.add_argument("config", nargs="?", help="TOML config file (defaults are used for missing keys)")
        else:
            sp.add_argument("--config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("run", help="train and evaluate one config")
    with_config(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ablate", help="run an ablation grid")
    with_config(sp)
    sp.add_argument("--grid", choices=sorted(experiments.NAMED_GRIDS))
    sp.add_argument("--axis", action="append", metavar="KEY=V1,V2,...")
    sp.add_argument("--mode", choices=("product", "sweep"), default="product")
    sp.add_argument("--name", default="custom")
    sp.add_argument("--seeds", help="comma-separated replicate seeds")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("compare", help="train several configs side by side")
    sp.add_argument("configs", nargs="*")
    sp.add_argument("--config", help="base config for --methods")
    sp.add_argument("--methods", help="comma-separated presets: " + ",".join(experiments.METHOD_PRESETS))
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint")
    sp.add_argument("checkpoint")
    with_config(sp, positional=False)
    sp.add_argument("--corpus", help="directory written by gen-corpus (GT images)")
    sp.add_argument("--mode", choices=("Y", "RGB"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gen-corpus", help="write a toy GT corpus as PNG files")
    sp.add_argument("out")
    sp.add_argument("--seed", type=int, default=2000)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--size", type=int, default=64)
    sp.set_defaults(func=cmd_gen_corpus)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"dump: {exc.dump_path}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DCKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
