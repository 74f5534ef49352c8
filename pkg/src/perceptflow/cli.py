"""``perceptflow`` command line: datagen, codec and backbone training, evaluation, inference."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import pipeline
from .datagen.scene import ConfigError
from .perception import TASKS, UnknownTaskError

log = logging.getLogger("perceptflow")


def build_parser():
    p = argparse.ArgumentParser(prog="perceptflow", description=__doc__)
    p.add_argument("--config", help="YAML file overriding the embedded defaults")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--force", action="store_true", help="rebuild outputs that already exist")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("datagen", help="render a seeded clip dataset")
    s.add_argument("--clips", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-codec", help="fit the video codec on RGB and modality videos")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="codec file to write")

    s = sub.add_parser("pretrain", help="generative rectified-flow pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="append-only JSONL metrics log")

    s = sub.add_parser("train", help="perception fine-tune")
    s.add_argument("--stage", choices=("latent", "ambient"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True, help="checkpoint to start from")
    s.add_argument("--out", required=True)
    s.add_argument("--log")

    s = sub.add_parser("eval", help="score a checkpoint (or ground truth with --oracle)")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--oracle", action="store_true")
    s.add_argument("--tasks", nargs="+")
    s.add_argument("--out", required=True)

    s = sub.add_parser("infer", help="run one task on a clip and write rasters, tables and panels")
    s.add_argument("--task", required=True)
    s.add_argument("--in", dest="inp", required=True, help="clip directory or T x H x W x 3 .npy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("selftest", help="oracle and invariant checks")
    s.add_argument("--only", nargs="+", help="subset of checks")

    s = sub.add_parser("pipeline", help="datagen through eval in one directory")
    s.add_argument("--out", required=True)

    s = sub.add_parser("dry-run", help="shape plumbing for the configured profile")
    s.add_argument("--profile", choices=config_mod.PROFILES)
    return p


def _overrides(args):
    o = {}
    if getattr(args, "profile", None):
        o["profile"] = args.profile
    return o


def _dispatch(args, cfg):
    cmd = args.command
    if cmd == "datagen":
        pipeline.make_dataset(cfg, args.out, clips=args.clips, seed=args.seed, force=args.force)
    elif cmd == "train-codec":
        pipeline.fit_codec(cfg, args.data, args.out, force=args.force)
    elif cmd == "pretrain":
        pipeline.run_pretrain(cfg, args.data, args.codec, args.out, force=args.force, log_path=args.log)
    elif cmd == "train":
        pipeline.run_stage(cfg, args.stage, args.data, args.ckpt, args.out, force=args.force, log_path=args.log)
    elif cmd == "eval":
        if not args.oracle and not args.ckpt:
            raise ConfigError("eval needs --ckpt unless --oracle is given")
        for t in args.tasks or ():
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; valid tasks: {', '.join(TASKS)}")
        report = pipeline.run_eval(cfg, args.data, args.out, ckpt=args.ckpt, oracle=args.oracle, tasks=args.tasks)
        print((Path(args.out) / "report.txt").read_text(), end="")
        return report
    elif cmd == "infer":
        pipeline.run_infer(args.task, args.inp, args.ckpt, args.out)
    elif cmd == "selftest":
        from .selftest import CHECKS, run_selftest

        unknown = set(args.only or ()) - set(CHECKS)
        if unknown:
            raise ConfigError(f"unknown checks {sorted(unknown)}; valid: {', '.join(CHECKS)}")
        results = run_selftest(args.only)
        for name, ok, detail, secs in results:
            print(f"{'PASS' if ok else 'FAIL'}  {name:<12} {detail}  ({secs:.1f}s)")
        if not all(r[1] for r in results):
            raise RuntimeError("selftest failed")
    elif cmd == "pipeline":
        pipeline.run_pipeline(cfg, args.out, force=args.force)
        print((Path(args.out) / "eval" / "report.txt").read_text(), end="")
    elif cmd == "dry-run":
        print(json.dumps(pipeline.dry_run(cfg), indent=2))
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = config_mod.load_config(args.config, _overrides(args))
        if args.print_config:
            print(config_mod.dump_config(cfg), end="")
            return 0
        if args.command is None:
            build_parser().print_usage(sys.stderr)
            return 2
        if cfg["profile"] == "paper-shape" and args.command != "dry-run":
            raise ConfigError("the paper-shape profile only supports dry-run")
        _dispatch(args, cfg)
    except (ConfigError, UnknownTaskError) as e:
        log.error("config error: %s", e)
        return 2
    except Exception as e:
        log.error("%s: %s", type(e).__name__, e)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
