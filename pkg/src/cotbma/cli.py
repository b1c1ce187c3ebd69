"""Command line entry point: ``cotbma <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import CapacityError, ProbeError, ValidationError
from .harness import KINDS, ExperimentConfig, load_config, run_experiment, write_result
from .llm_probe import ChatClient, CityTable, MockChatClient, PromptStyle, build_city_task, evaluate

EXIT_OK, EXIT_VALIDATION, EXIT_CAPACITY, EXIT_PROBE = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cotbma", description="Exact chain-of-thought inference experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run the {kind} experiment")
        s.add_argument("--config", type=Path, help="JSON experiment config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--verbose", action="store_true")
    c = sub.add_parser("city-eval", help="score a chat model on city arithmetic")
    c.add_argument("--style", required=True, choices=[s.value for s in PromptStyle])
    c.add_argument("--n-demos", type=int, default=2)
    c.add_argument("--n-tests", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--mock", action="store_true", help="use the offline mock backend")
    c.add_argument("--base-url")
    c.add_argument("--model")
    c.add_argument("--out", type=Path)
    c.add_argument("--verbose", action="store_true")
    return p


def _run_kind(args) -> int:
    if args.config is not None:
        cfg = load_config(args.config, seed=args.seed)
    else:
        cfg = ExperimentConfig(kind=args.command, seed=args.seed or 0)
    if cfg.kind != args.command:
        raise ValidationError(f"kind: config says {cfg.kind!r} but subcommand is {args.command!r}")
    if args.threads < 1:
        raise ValidationError("threads: must be positive")
    result = run_experiment(cfg, threads=args.threads)
    out = args.out if args.out is not None else Path(cfg.output_path)
    for path in write_result(result, out):
        print(path)
    return EXIT_OK


def _run_city(args) -> int:
    table = CityTable.default()
    task = build_city_task(table, args.n_demos, np.random.default_rng(args.seed), args.n_tests)
    client = MockChatClient(table) if args.mock else ChatClient(args.base_url, args.model)
    report = evaluate(task, args.style, client, table)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"city_{args.style}.csv").write_text(report.to_csv())
        (args.out / f"city_{args.style}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "city-eval":
            return _run_city(args)
        return _run_kind(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CapacityError as exc:
        print(f"capacity: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except ProbeError as exc:
        print(f"probe: {exc}", file=sys.stderr)
        return EXIT_PROBE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
