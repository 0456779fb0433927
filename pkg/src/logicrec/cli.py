"""Command-line front end: ingest, train, recommend, evaluate, sweep-hidden,
synth, and selftest subcommands over the pipeline functions."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from . import pipeline
from .errors import (
    ConfigError,
    GenerationError,
    LogicRecError,
    OracleScaleError,
    ParseError,
    SchemaError,
    TrainingError,
)

EXIT_CODES = {
    ConfigError: 2,
    ParseError: 2,
    SchemaError: 2,
    TrainingError: 3,
    GenerationError: 4,
    OracleScaleError: 5,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    defaults = pipeline.PipelineConfig()
    for f in fields(pipeline.PipelineConfig):
        kind = type(getattr(defaults, f.name))
        parser.add_argument(
            f"--{f.name.replace('_', '-')}", type=kind, default=None,
            help=f"override {f.name} (default {getattr(defaults, f.name)})",
        )


def _config_from_args(args: argparse.Namespace) -> pipeline.PipelineConfig:
    config = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
    for f in fields(pipeline.PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(config, f.name, value)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="logicrec",
        description="Rule-guided explainable recommendation over knowledge graphs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a TSV graph, split interactions, persist a dataset dir")
    p.add_argument("triples")
    p.add_argument("schema")
    p.add_argument("out")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="mine rules, run EM, train the reasoner, write checkpoints")
    p.add_argument("dataset")
    p.add_argument("out")
    _add_config_flags(p)

    p = sub.add_parser("recommend", help="top-k items plus explanation paths for users")
    p.add_argument("dataset")
    p.add_argument("checkpoints")
    p.add_argument("users", nargs="+", help="user entity names, e.g. user:3")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--out", default=None)

    p = sub.add_parser("evaluate", help="ranking metrics and faithfulness on the test split")
    p.add_argument("dataset")
    p.add_argument("checkpoints")
    p.add_argument("--out", default=None)

    p = sub.add_parser("sweep-hidden", help="re-run EM across hidden-set sizes")
    p.add_argument("dataset")
    p.add_argument("--sizes", default="10,20,30,40,50")
    p.add_argument("--out", default=None)
    _add_config_flags(p)

    p = sub.add_parser("synth", help="generate a planted-rule benchmark dataset")
    p.add_argument("out")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--attributes", type=int, default=30)
    p.add_argument("--planted", type=int, default=3)
    p.add_argument("--rule-len", type=int, default=2)
    p.add_argument("--precision", type=float, default=0.9)
    p.add_argument("--chains", type=int, default=300)
    p.add_argument("--decoys", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("selftest", help="cross-check exact code against shipped oracles")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "ingest":
            pipeline.cmd_ingest(args.triples, args.schema, args.out,
                                test_fraction=args.test_fraction, seed=args.seed)
        elif args.command == "train":
            pipeline.cmd_train(args.dataset, args.out, _config_from_args(args))
        elif args.command == "recommend":
            pipeline.cmd_recommend(args.dataset, args.checkpoints, args.users,
                                   topk=args.topk, out_dir=args.out)
        elif args.command == "evaluate":
            pipeline.cmd_evaluate(args.dataset, args.checkpoints, out_path=args.out)
        elif args.command == "sweep-hidden":
            sizes = tuple(int(s) for s in args.sizes.split(","))
            pipeline.cmd_sweep_hidden(args.dataset, _config_from_args(args),
                                      sizes=sizes, out_path=args.out)
        elif args.command == "synth":
            pipeline.cmd_synth(
                args.out, n_users=args.users, n_items=args.items,
                n_attributes=args.attributes, n_planted=args.planted,
                rule_len=args.rule_len, precision=args.precision,
                chains_per_rule=args.chains, n_decoys=args.decoys,
                noise_rate=args.noise, holdout_fraction=args.holdout, seed=args.seed,
            )
        elif args.command == "selftest":
            if not pipeline.cmd_selftest(seed=args.seed):
                return 1
    except LogicRecError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES.get(type(e), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
