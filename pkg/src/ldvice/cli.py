"""Command line entry point. Exit codes: 0 success, 1 internal error, 2 user or config error."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import experiment as ex
from .datasets import make_splits
from .errors import (CompatibilityError, ConditionError, ConfigError, CorruptArchiveError, EmptyInputError,
                     ArchiveVersionError, ShapeError)

USER_ERRORS = (ConfigError, CompatibilityError, ConditionError, EmptyInputError, ShapeError, CorruptArchiveError,
               ArchiveVersionError, FileNotFoundError, jsonschema.ValidationError)

log = logging.getLogger("ldvice")


def _run_config(args):
    return ex.load_run_config(args.config, task=getattr(args, "task", None), seed=args.seed,
                              out=getattr(args, "out", None))


def cmd_init(args):
    cfg = ex.default_run_config(args.task, args.root)
    text = json.dumps(cfg, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_data(args):
    cfg = ex.load_run_config(args.config, task=args.task, seed=args.seed)
    out = args.out or cfg.get("data_dir")
    if not out:
        raise ConfigError("no output directory: pass --out or set data_dir")
    splits = make_splits(ex.dataset_config(cfg), out)
    print(json.dumps({k: len(v) for k, v in splits.items()}))


def cmd_train(args):
    cfg = ex.load_run_config(args.config, task=args.task, seed=args.seed)
    components = ex.COMPONENTS if args.component == "all" else (args.component,)
    for c in components:
        info = ex.train_component(cfg, c)
        print(json.dumps(info, sort_keys=True))


def cmd_generate(args):
    cfg = _run_config(args)
    out = ex.cmd_generate(cfg)
    print(json.loads((out / "summary.json").read_text()))
    print(out)


def cmd_evaluate(args):
    report, skipped = ex.cmd_evaluate(args.dir)
    for name, err in skipped:
        log.warning("skipped %s: %s", name, err)
    print(json.dumps(report.aggregate, indent=1, sort_keys=True))


def cmd_sweep(args):
    spec = ex.load_sweep_spec(args.config, out=args.out, seed=args.seed)
    out = ex.cmd_sweep(spec, workers=args.workers)
    print(out / "sweep.csv")


def cmd_report(args):
    info = ex.cmd_report(args.dir)
    for name in info["skipped"]:
        log.warning("skipped unreadable run %s", name)
    print(json.dumps(info))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldvice", description="Latent diffusion video counterfactuals at toy scale.")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="run config JSON (defaults: built-in desk config for --task)")
        sp.add_argument("--task", choices=["classification", "regression"], default=None)
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", default=None)

    sp = sub.add_parser("init-config", help="write a default run config")
    sp.add_argument("--task", choices=["classification", "regression"], default="classification")
    sp.add_argument("--root", default="ldvice-work", help="directory for checkpoints and outputs")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_init)

    sp = sub.add_parser("data", help="generate and persist the dataset splits")
    common(sp)
    sp.set_defaults(fn=cmd_data)

    sp = sub.add_parser("train", help="train codec, denoiser or target")
    sp.add_argument("component", choices=[*ex.COMPONENTS, "all"])
    common(sp, out=False)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("generate", help="generate counterfactuals for the evaluation set")
    common(sp)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("evaluate", help="compute metrics for a run directory")
    sp.add_argument("dir")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("sweep", help="run an ablation grid from a sweep spec")
    sp.add_argument("--config", required=True, help="sweep spec JSON")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("report", help="tables and frame grids for a run or sweep directory")
    sp.add_argument("dir")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.fn(args)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
