"""Command line: ``ecoc-lm {build-codebook,train,eval,sample,plot}``.

Exit codes: 0 success, 2 configuration or compatibility error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .codebook import CodebookError
from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusError
from .embeddings import EmbeddingError
from .network import NumericError
from .sampling import StrategyError
from .training import (CompatibilityError, format_record, plot_metrics, run_build_codebook,
                       run_eval, run_sample, run_train)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CONFIG_ERRORS = (ConfigError, CompatibilityError, CodebookError, CorpusError, EmbeddingError,
                 StrategyError, FileNotFoundError)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                           metavar=type(f.default).__name__.upper())


def _config_from(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)
                 if getattr(args, f.name) is not None}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecoc-lm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-codebook", help="write a codebook and its separation report")
    _add_config_flags(p)
    p.add_argument("--out", help="directory for codebook.txt (default: the run directory)")

    p = sub.add_parser("train", help="train a language model")
    _add_config_flags(p)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="perplexity and bit diagnostics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    p.add_argument("--corpus", help="evaluate this file instead of the run's split")
    p.add_argument("--mode", choices=("sum", "max", "both"), default=None,
                   help="ecoc scoring mode (default: both for ecoc heads)")
    p.add_argument("--vocab")
    p.add_argument("--codebook")
    p.add_argument("--batch-size", type=int, help="default: the run's eval_batch_size")
    p.add_argument("--bptt", type=int, help="default: the run's bptt")

    p = sub.add_parser("sample", help="generate text from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--prefix", default="", help="whitespace-separated prefix tokens")
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--decode", choices=("greedy", "temperature"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab")
    p.add_argument("--codebook")

    p = sub.add_parser("plot", help="render loss/perplexity curves to SVG")
    p.add_argument("metrics")
    p.add_argument("--out", help="SVG path (default: next to the metrics file)")
    return parser


def _dispatch(args) -> int:
    if args.command == "build-codebook":
        report = run_build_codebook(_config_from(args), args.out)
        for key, val in report.items():
            print(f"{key}={val}")
    elif args.command == "train":
        log = (lambda _msg: None) if args.quiet else print
        result = run_train(_config_from(args), log=log)
        print(f"run_dir={result.run_dir} epochs={result.epochs_run} "
              f"best_valid_perplexity={result.best_valid_perplexity!r}")
    elif args.command == "eval":
        modes = None
        if args.mode:
            modes = ("sum", "max") if args.mode == "both" else (args.mode,)
        result = run_eval(args.checkpoint, args.split, args.corpus, modes, args.vocab,
                          args.codebook, args.batch_size, args.bptt)
        print(format_record(result))
    elif args.command == "sample":
        tokens = run_sample(args.checkpoint, args.prefix.split(), args.length, args.decode,
                            args.temperature, args.seed, args.vocab, args.codebook)
        print(" ".join(tokens))
    elif args.command == "plot":
        out = args.out or str(Path(args.metrics).with_suffix(".svg"))
        print(plot_metrics(args.metrics, out))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
