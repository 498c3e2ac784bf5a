"""Command-line entry point: run, validate, oracle and plotdata subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import CapacityError, ValidationError
from .runner import emit_plot_data, load_config, read_result_csv, run_experiment, run_oracle

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CAPACITY = 3


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfmc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pfmc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config and write CSV + JSON results")
    run.add_argument("config", help="experiment config (JSON file)")
    run.add_argument("--seed", type=_seed, help="override the config's master seed")
    run.add_argument("--threads", type=_positive_int,
                     help="sampling worker threads (default: PFMC_THREADS or 1)")
    run.add_argument("--out", default=".", help="output directory (default: current)")

    val = sub.add_parser("validate", help="schema-check a config without running it")
    val.add_argument("config")

    ora = sub.add_parser("oracle", help="exact statevector values for a small config")
    ora.add_argument("config")
    ora.add_argument("--out", help="write CSV + JSON here instead of printing the CSV")

    plot = sub.add_parser("plotdata", help="reshape a result CSV into tidy (x, y, yerr, series)")
    plot.add_argument("csv", help="result CSV written by `pfmc run`")
    plot.add_argument("plotspec", help="JSON with x, y, yerr, series_by and optional series")
    plot.add_argument("--out", help="output file (default: stdout)")
    return parser


def _load(path: str):
    if not Path(path).is_file():
        raise ValidationError(f"config file not found: {path}")
    return load_config(Path(path))


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "validate":
        cfg = _load(args.config)
        print(f"ok: kind={cfg.kind} seed={cfg.seed}")
        return EXIT_OK
    if args.command == "run":
        cfg = _load(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        result = run_experiment(cfg, threads=args.threads)
        out_dir = Path(cfg.output_path) if args.out == "." and cfg.output_path else Path(args.out)
        csv_path, json_path = result.write(out_dir)
        print(f"wrote {csv_path} and {json_path} ({len(result.rows)} rows)")
        return EXIT_OK
    if args.command == "oracle":
        result = run_oracle(_load(args.config))
        if args.out:
            csv_path, json_path = result.write(Path(args.out), stem=(result.config.name
                                                                    or result.config.kind)
                                               + "_oracle")
            print(f"wrote {csv_path} and {json_path}")
        else:
            sys.stdout.write(result.to_csv())
        return EXIT_OK
    if args.command == "plotdata":
        if not Path(args.csv).is_file():
            raise ValidationError(f"result file not found: {args.csv}")
        try:
            spec = json.loads(Path(args.plotspec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read plot spec {args.plotspec}: {exc}") from exc
        text = emit_plot_data(read_result_csv(args.csv), spec)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
