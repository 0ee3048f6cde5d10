"""Command line entry point.

    ipsavg run <config.json | shipped-name> [--out DIR] [--seed S] [--threads T] [--verify]
    ipsavg validate <config.json | shipped-name>
    ipsavg list

Exit codes: 0 all criteria pass, 1 a criterion fails, 2 configuration error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import filecmp
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from ._backend import default_backend
from .experiments import RUNNERS, RunContext
from .truncated import EvolveError

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
NUMERIC_ERRORS = (EvolveError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError)


def _default_out(config: dict, source: str) -> Path:
    if "output" in config:
        return Path(config["output"])
    base = os.environ.get("IPSAVG_OUT", "ipsavg-out")
    # several shipped configs share an experiment, so name the folder after the config
    return Path(base) / Path(source).stem


def _load_valid(source: str) -> dict:
    config = cfgmod.load(source)
    problems = cfgmod.validate(config)
    if problems:
        raise cfgmod.ConfigError(problems)
    return config


def execute(config: dict, out: Path, seed: int, threads: int = 1) -> tuple[int, dict]:
    """Run one experiment into ``out``; return the exit code and the summary."""
    out.mkdir(parents=True, exist_ok=True)
    digest = cfgmod.config_hash(config)
    ctx = RunContext(config, seed, out, digest, threads)
    start = time.perf_counter()
    criteria = RUNNERS[config["experiment"]](ctx)
    summary = {
        "experiment": config["experiment"],
        "criteria": [c.to_dict() for c in criteria],
        "pass": all(c.passed for c in criteria),
        "wall_time_s": time.perf_counter() - start,
        "files": ctx.files,
        "details": ctx.extras,
        "reproducibility": {"config_sha256": digest, "seed": seed, "version": __version__, "backend": default_backend()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n")
    return (EXIT_PASS if summary["pass"] else EXIT_FAIL), summary


def _csv_hash(path: Path) -> str | None:
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                return None
            if line.startswith("# config_sha256="):
                return line.strip().split("=", 1)[1]
    return None


def verify(config: dict, out: Path, seed: int, threads: int = 1) -> tuple[int, list[str]]:
    """Check that ``out`` was produced by this config and seed, byte for byte."""
    digest = cfgmod.config_hash(config)
    existing = sorted(out.glob("*.csv"))
    if not existing:
        return EXIT_CONFIG, [f"nothing to verify in {out}"]
    problems = [f"{p.name}: config hash mismatch" for p in existing if _csv_hash(p) != digest]
    if problems:
        return EXIT_FAIL, problems
    with tempfile.TemporaryDirectory() as tmp:
        code, summary = execute(config, Path(tmp), seed, threads)
        for name in summary["files"]:
            if not (out / name).exists():
                problems.append(f"{name}: missing from {out}")
            elif not filecmp.cmp(out / name, Path(tmp) / name, shallow=False):
                problems.append(f"{name}: differs from a fresh run")
    return (EXIT_FAIL if problems else code), problems


def _print_summary(summary: dict) -> None:
    for c in summary["criteria"]:
        mark = "PASS" if c["pass"] else "FAIL"
        extra = f" value={c['value']}" if c["value"] is not None else ""
        extra += f" threshold={c['threshold']}" if c["threshold"] is not None else ""
        print(f"[{mark}] {c['name']}{extra}")
    print(f"{summary['experiment']}: {'pass' if summary['pass'] else 'FAIL'} ({summary['wall_time_s']:.2f} s)")


def cmd_run(args) -> int:
    try:
        config = _load_valid(args.config)
    except (cfgmod.ConfigError, FileNotFoundError) as exc:
        for v in getattr(exc, "violations", [str(exc)]):
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out = Path(args.out) if args.out else _default_out(config, args.config)
    try:
        if args.verify:
            code, problems = verify(config, out, seed, args.threads)
            for p in problems:
                print(f"verify: {p}", file=sys.stderr)
            if not problems:
                print(f"verify: {out} reproduced byte for byte")
            return code
        code, summary = execute(config, out, seed, args.threads)
    except NUMERIC_ERRORS as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print_summary(summary)
    print(f"wrote {len(summary['files'])} files and summary.json to {out}")
    return code


def cmd_validate(args) -> int:
    try:
        config = cfgmod.load(args.config)
    except (cfgmod.ConfigError, FileNotFoundError) as exc:
        for v in getattr(exc, "violations", [str(exc)]):
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    problems = cfgmod.validate(config)
    for w in cfgmod.warnings(config) if not problems else []:
        print(f"warning: {w}")
    for p in problems:
        print(p)
    if not problems:
        print("ok")
    return EXIT_CONFIG if problems else EXIT_PASS


def cmd_list(args) -> int:
    for name in cfgmod.shipped_configs():
        print(name)
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipsavg", description="Averaging experiments for spatial birth-death models.")
    parser.add_argument("--version", action="version", version=f"ipsavg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", help="path to a JSON config, or the name of a shipped config")
    run.add_argument("--out", help="output directory (default: config 'output', else $IPSAVG_OUT/<config name>)")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--threads", type=int, default=1, help="worker processes for Monte Carlo ensembles")
    run.add_argument("--verify", action="store_true", help="rerun and compare against existing outputs")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)

    lst = sub.add_parser("list", help="list shipped configs")
    lst.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
