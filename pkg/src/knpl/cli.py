"""Command-line entry point: ``knpl <stage> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import KnplError, StageError
from .pipeline import STAGES, RunDir, run_pipeline, run_stage
from .report import verify

DEFAULT_RUN_DIR = "run"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="knpl", description="Knowledge-neuron laboratory on a tiny synthetic transformer.")
    p.add_argument("command", choices=[*STAGES, "all", "verify", "config", "ingest"], nargs="?", default=None)
    p.add_argument("--config", type=Path, help="INI configuration file (defaults are used when omitted)")
    p.add_argument("--run-dir", type=Path, help=f"run directory (falls back to $KNPL_RUN_DIR, then ./{DEFAULT_RUN_DIR})")
    p.add_argument("--seed", type=int, help="override the world and training seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-instance stages")
    p.add_argument("--stage", choices=STAGES, help="with 'all': stop after this stage; alone: run this stage")
    p.add_argument("--refresh", action="store_true", help="recompute stages whose cached output is stale")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_run_dir(arg: Path | None) -> Path:
    if arg is not None:
        return arg
    return Path(os.environ.get("KNPL_RUN_DIR") or DEFAULT_RUN_DIR)


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["ingest"]:
        from .ingest import main as ingest_main

        return ingest_main(argv[1:])
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command or args.stage
    if command is None:
        _parser().print_usage(sys.stderr)
        return 2
    try:
        cfg = load_config(args)
        run_root = resolve_run_dir(args.run_dir)
        if command == "config":
            sys.stdout.write(cfg.canonical())
            return 0
        if command == "all":
            status = run_pipeline(run_root, cfg, jobs=args.jobs, refresh=args.refresh, until=args.stage)
            for stage, st in status.items():
                print(f"{stage}\t{st}")
            return 0
        if command == "verify":
            run_cfg = PipelineConfig.load(run_root / "config.ini") if args.config is None else cfg
            problems = verify(run_root, run_cfg)
            for p in problems:
                print(f"MISMATCH\t{p}")
            print(f"verify\t{'ok' if not problems else 'failed'}\t{len(problems)} discrepancies")
            return 0 if not problems else 1
        run = RunDir(run_root)
        run.root.mkdir(parents=True, exist_ok=True)
        cfg.write(run.root / "config.ini")
        print(f"{command}\t{run_stage(run, cfg, command, jobs=args.jobs, refresh=args.refresh)}")
        return 0
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KnplError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
