"""Command-line entry point.

Subcommands: synth (emit a synthetic dataset as TSV splits), train
(single config-driven run), sweep, grid, and eval (score a saved
checkpoint against a test TSV). Exit codes: 0 ok, 2 config error,
3 runtime failure (training divergence or non-finite numerics).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import experiment as X
from . import metrics as E
from . import models as M
from . import synth as S
from . import tensor as T
from .data import InteractionLog, export_splits, load_interactions


def _add_common(p, seeds=True):
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory")
    if seeds:
        p.add_argument("--seeds", help="comma-separated seed list overriding the config")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balancerec",
        description="Train and evaluate confounder-balanced recommenders.")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("synth", help="emit synthetic TSV splits"), seeds=False)
    _add_common(sub.add_parser("train", help="run every (method, seed) in a config"))
    _add_common(sub.add_parser("sweep", help="sweep a parameter, emit curves.csv"))
    _add_common(sub.add_parser("grid", help="exhaustive hyperparameter search"))

    p_eval = sub.add_parser("eval", help="score a checkpoint against a test TSV")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint JSON path")
    p_eval.add_argument("--test", required=True, help="test interactions TSV")
    p_eval.add_argument("--train", help="train TSV; its items are excluded per user")
    p_eval.add_argument("--use-confounder", action="store_true",
                        help="route the inferred confounder through the forward pass")
    p_eval.add_argument("--out", help="directory for report.json (optional)")
    return parser


def _apply_seed_override(echo: dict, seeds_arg: str | None) -> dict:
    if seeds_arg is None:
        return echo
    try:
        echo["seeds"] = [int(s) for s in seeds_arg.split(",") if s != ""]
    except ValueError as e:
        raise X.ConfigError(f"seeds: {e}") from e
    return X.normalize_config(echo)


def _cmd_synth(args) -> int:
    echo = X.load_config(args.config)
    if "synth" not in echo["data"]:
        raise X.ConfigError("data: the synth subcommand needs a data.synth block")
    dataset = S.generate(S.SynthConfig(**echo["data"]["synth"]))
    os.makedirs(args.out, exist_ok=True)
    paths = export_splits(dataset.train, dataset.val, dataset.test,
                          os.path.join(args.out, "synth"))
    X._write_json(os.path.join(args.out, "meta.json"),
                  dict(dataset.meta, num_users=dataset.num_users,
                       num_items=dataset.num_items))
    print("\n".join(paths))
    return 0


def _rebase(log: InteractionLog, num_users: int, num_items: int) -> InteractionLog:
    """Map a standalone TSV back to its original ids inside a model's id space."""
    users = log.orig_users[log.users]
    items = log.orig_items[log.items]
    if len(users) and (users.max() >= num_users or items.max() >= num_items):
        raise X.ConfigError("eval: TSV ids exceed the checkpoint's dimensions")
    return InteractionLog(users, items, log.labels, log.propensities,
                          num_users=num_users, num_items=num_items)


def _cmd_eval(args) -> int:
    bundle = M.load_checkpoint(args.checkpoint)
    nu, ni = bundle.dims.num_users, bundle.dims.num_items
    test = _rebase(load_interactions(args.test), nu, ni)
    if args.train:
        train = _rebase(load_interactions(args.train), nu, ni)
    else:
        train = InteractionLog(np.array([], dtype=np.int64),
                               np.array([], dtype=np.int64),
                               np.array([], dtype=np.int64),
                               num_users=nu, num_items=ni)
    report = E.evaluate(bundle, train, test, args.use_confounder)
    text = report.to_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "eval":
            return _cmd_eval(args)
        echo = _apply_seed_override(X.load_config(args.config), args.seeds)
        if args.command == "train":
            X.run(echo, args.out, jobs=args.jobs)
        elif args.command == "sweep":
            X.sweep(echo, args.out, jobs=args.jobs)
        else:
            X.gridsearch(echo, args.out, jobs=args.jobs)
        return 0
    except (X.DivergenceError, T.NonFiniteError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        # ConfigError, malformed inputs and unreadable paths all land here
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
