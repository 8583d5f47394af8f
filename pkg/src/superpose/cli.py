"""Command-line entry points.

    superpose run            --config cfg.toml [--seed N] [--out DIR] [--mode 1d|2d] [--stage NAME]
    superpose train-expert   --config cfg.toml [--domain base|fine|both]
    superpose merge-baseline --config cfg.toml
    superpose superpose      --config cfg.toml [--mode 1d|2d]
    superpose eval           --config cfg.toml
    superpose analyze        --config cfg.toml

Exit status is 0 on success; otherwise the code of the failing stage
(see ``pipeline.STAGES``). Usage errors exit with 2.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import default_config_path, load_config
from .errors import ConfigError


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file (default: bundled default.toml)")
    common.add_argument("--seed", type=int, help="override [experiment] seed")
    common.add_argument("--out", help="override [experiment] out_dir")
    common.add_argument("--mode", choices=("1d", "2d"), help="override [experiment] mode")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="superpose", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="full pipeline")
    r.add_argument("--stage", choices=pipeline.RUN_ORDER, default="train-expert",
                   help="resume from this stage using artifacts already in the output dir")
    t = sub.add_parser("train-expert", parents=[common], help="train the base expert and/or fine-tune it")
    t.add_argument("--domain", choices=("base", "fine", "both"), default="both")
    sub.add_parser("merge-baseline", parents=[common], help="build linear and task-arithmetic merges")
    sub.add_parser("superpose", parents=[common], help="train schedule and autoencoders")
    sub.add_parser("eval", parents=[common], help="evaluate saved checkpoints into report.json")
    sub.add_parser("analyze", parents=[common], help="write per-figure CSVs and hidden-state exports")
    return p


def _load(args):
    path = args.config or default_config_path()
    cfg = load_config(path)
    return cfg.with_overrides(seed=args.seed, mode=args.mode, out_dir=args.out)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _load(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return pipeline.STAGES["config"]
    try:
        if args.command == "run":
            rep = pipeline.run_experiment(cfg, start=args.stage)
            print(f"report written to {cfg.out_dir}/report.json")
            _summary(rep)
            return 0
        ws = pipeline.Workspace(cfg).prepare()
        if args.command == "train-expert":
            stages = {"base": ["train-expert"], "fine": ["fine-tune"], "both": ["train-expert", "fine-tune"]}
            for stage in stages[args.domain]:
                pipeline.run_stage(ws, stage)
        else:
            out = pipeline.run_stage(ws, args.command)
            if args.command == "eval":
                _summary(out)
        return 0
    except pipeline.StageError as e:
        print(str(e), file=sys.stderr)
        print(f"partial logs kept in {cfg.out_dir}/logs", file=sys.stderr)
        return e.exit_code


def _summary(rep):
    if rep is None:
        return
    print(f"{'model':<12}{'ppl A':>10}{'ppl B':>10}{'ppl all':>10}{'acc all':>10}")
    for m, d in rep.perplexity.items():
        print(f"{m:<12}{d['base_domain']:>10.3f}{d['fine_domain']:>10.3f}{d['combined']:>10.3f}"
              f"{rep.accuracy[m]['combined']:>10.4f}")


if __name__ == "__main__":
    sys.exit(main())
