"""Command line: ``ezv2 run``, ``ezv2 eval`` and ``ezv2 verify``."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .pipeline import PRESETS, ConfigError, Runner, ThreadedRun, config_from_dict, configure_logging, evaluate, load_config


def _parse_criteria(text: str) -> list[int]:
    try:
        nums = sorted({int(part) for part in text.split(",") if part.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None
    if not nums or not all(1 <= n <= 11 for n in nums):
        raise argparse.ArgumentTypeError("criteria are numbered 1 to 11")
    return nums


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ezv2", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and write metrics plus checkpoints")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="JSON config file (may name a preset under the key 'preset')")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in desk-scale configuration")
    run.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--workers", type=int, default=None, help="batch workers; more than one, or --no-deterministic, selects the concurrent mode")
    run.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None, help="single-thread bit-reproducible mode (default on)")
    run.add_argument("--resume", help="continue from a checkpoint written by an earlier run")

    ev = sub.add_parser("eval", help="mean evaluation return of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)

    ver = sub.add_parser("verify", help="run the acceptance checks and print one line per criterion")
    ver.add_argument("--criteria", type=_parse_criteria, default=None, help="comma separated subset, e.g. 1,2,6")
    ver.add_argument("--all", action="store_true", help="include the learning-curve criteria 9 and 10 (slow)")
    return p


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else PRESETS[args.preset]()
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    workers: dict = {}
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("workers.batch_workers", "must be >= 1")
        workers["batch_workers"] = args.workers
    if args.deterministic is not None:
        workers["deterministic"] = args.deterministic
    if workers:
        over["workers"] = workers
    return config_from_dict(over, cfg) if over else cfg


def cmd_run(args) -> int:
    if args.resume:
        runner = Runner.from_checkpoint(args.resume, out_dir=args.out)
    else:
        runner = Runner(_resolve_config(args), out_dir=args.out)
    w = runner.cfg.workers
    if w.deterministic and w.batch_workers == 1:
        out = runner.run()
    else:
        out = ThreadedRun(runner).run()
    print(json.dumps(out))
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return 2
    runner = Runner.from_checkpoint(args.checkpoint)
    rets = evaluate(runner.learner.model.snapshot(), runner._make_env, runner.search_cfg, args.episodes, args.seed)
    print(json.dumps({"episodes": args.episodes, "mean_return": float(np.mean(rets)), "returns": rets}))
    return 0


def cmd_verify(args) -> int:
    from .verify import CHECKS, run_all

    if args.criteria:
        numbers = args.criteria
    elif args.all:
        numbers = sorted(CHECKS)
    else:
        numbers = [n for n in sorted(CHECKS) if n not in (9, 10)]
    results = run_all(numbers, echo=lambda line: print(line, flush=True))
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed" + (f"; failed: {failed}" if failed else ""))
    return 1 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        return {"run": cmd_run, "eval": cmd_eval, "verify": cmd_verify}[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
