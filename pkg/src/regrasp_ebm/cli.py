"""``regrasp-ebm`` command line.

Exit codes: 0 success, 2 the planner found no sequence, 1 any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

EXIT_OK, EXIT_ERROR, EXIT_NO_PLAN = 0, 1, 2
COMMANDS = ("gen-data", "train", "calibrate", "plan", "eval-onestep", "eval-multistep", "ablate")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _global_flags(default) -> argparse.ArgumentParser:
    # accepted before or after the subcommand; the subcommand copy must not
    # overwrite values given before it, hence SUPPRESS there
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default, help="TOML run configuration")
    g.add_argument("--seed", type=_u64, default=default, help="global seed (overrides the config)")
    g.add_argument("--out", default=default, help="artifact directory (overrides the config)")
    g.add_argument("--threads", type=_positive, default=default, help="worker threads (overrides the config)")
    g.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return g


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regrasp-ebm", parents=[_global_flags(None)],
                                description="Shared-grasp connectivity planning on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)
    sub_flags = _global_flags(argparse.SUPPRESS)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[sub_flags])
        if name == "plan":
            sp.add_argument("--init", nargs="+", required=True, help="12 numbers or m,x,y,theta")
            sp.add_argument("--goal", nargs="+", required=True, help="12 numbers or m,x,y,theta")
            sp.add_argument("--hard-check", action="store_true", help="re-verify every pair with the oracle")
            sp.add_argument("--cost", choices=("jseq", "jplus", "jtrunc"))
            sp.add_argument("--ktop", type=_positive)
            sp.add_argument("--nmax", type=_positive)
            sp.add_argument("--batch", type=_positive)
    return p


def _config(args):
    from .evaluation import load_config
    cfg = load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)
    if args.command == "plan":
        changes = {k: v for k, v in (("cost", args.cost), ("k_top", args.ktop), ("n_max", args.nmax),
                                     ("batch_size", args.batch)) if v is not None}
        if changes:
            planner = dataclasses.replace(cfg.planner, **changes)
            cfg = dataclasses.replace(cfg, planner=planner)
    return cfg


def _limit_blas_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        _limit_blas_threads(args.threads)
    from . import evaluation as ev
    try:
        cfg = _config(args)
        cfg.paths.root.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            out = ev.cmd_gen_data(cfg)
        elif args.command == "train":
            out = ev.cmd_train(cfg)
        elif args.command == "calibrate":
            out = ev.cmd_calibrate(cfg)
        elif args.command == "plan":
            scene = cfg.load_scene()
            init, goal = ev.parse_pose(args.init, scene), ev.parse_pose(args.goal, scene)
            result, out = ev.cmd_plan(cfg, init, goal, args.hard_check)
            print(json.dumps(out, indent=2, sort_keys=True))
            return EXIT_OK if result.success else EXIT_NO_PLAN
        elif args.command == "eval-onestep":
            out = ev.cmd_eval_onestep(cfg)["sv"]
        elif args.command == "eval-multistep":
            out = ev.cmd_eval_multistep(cfg)["by_k_top"]
        else:
            out = ev.cmd_ablate(cfg)
    except (ev.RunError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # a crash is still exit 1, never the planner-failure code
        logging.getLogger(__name__).debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
