"""``causer`` command line: gen-synth, train, evaluate, export-graph, explain.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""
import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import checkpoint
from .causal_graph import EXPORT_THRESHOLD, export_graph, item_matrix, write_graph
from .config import RunConfig, dump_config, load_config
from .data_io import load_sequences, split_leave_last, write_assignments, write_sequences
from .errors import CauserError, ParseError, TrainingDivergence, UsageError
from .evaluation import evaluate_users, explain
from .experiments import build_stack, synthetic_data
from .item_space import ItemFeatures, read_features, write_features
from .trainer import train

log = logging.getLogger("causer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

SEQUENCES = "sequences.tsv"
FEATURES = "features.csv"
TRUTH = "graph.json"
ASSIGNMENTS = "assignments.csv"
MODEL = "model.json"
LOCK = "config.lock.json"
TRAIN_LOG = "train_log.jsonl"
ITER_LOG = "iter_log.jsonl"
METRICS = "metrics.json"


class DataError(CauserError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        over["threads"] = args.threads
    return cfg.replace(**over) if over else cfg


def _need_dir(path, what):
    if not os.path.isdir(path):
        raise DataError(f"{what} directory {path!r} does not exist")


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_gen_synth(args):
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    dataset, truth, cluster_of, feats = synthetic_data(cfg)
    write_sequences(os.path.join(args.out, SEQUENCES), dataset)
    write_features(os.path.join(args.out, FEATURES), feats)
    write_assignments(os.path.join(args.out, ASSIGNMENTS), dataset.items, cluster_of)
    write_graph(os.path.join(args.out, TRUTH), export_graph(truth, threshold=0.5))
    print(json.dumps({"users": dataset.n_users, "items": dataset.n_items,
                      "interactions": int(sum(len(st) for s in dataset.sequences for st in s))}))


def _load_data(data_dir, seed, feature_dim):
    _need_dir(data_dir, "data")
    path = os.path.join(data_dir, SEQUENCES)
    if not os.path.exists(path):
        raise DataError(f"missing {path}")
    dataset = load_sequences(path)
    fpath = os.path.join(data_dir, FEATURES)
    if os.path.exists(fpath):
        raw = read_features(fpath).aligned(dataset.items)
    else:
        # no feature file: i.i.d. standard normal features fixed by the seed
        raw = np.random.default_rng(seed).standard_normal((dataset.n_items, feature_dim))
    return dataset, ItemFeatures(list(dataset.items), raw)


def cmd_train(args):
    cfg = _config(args)
    dataset, feats = _load_data(args.data, cfg.seed, cfg.feature_dim)
    split = split_leave_last(dataset)
    os.makedirs(args.out, exist_ok=True)
    dump_config(cfg, os.path.join(args.out, LOCK))
    stack = build_stack(cfg, dataset.n_users, feats.raw)
    started = time.perf_counter()

    def on_epoch(rec, _stack):
        if not args.reproducible:
            rec["seconds"] = round(time.perf_counter() - started, 3)
        log.info("epoch %(epoch)d loss %(loss).4f b %(dag_penalty).3e", rec)

    result = train(split.train, stack, cfg.optimizer(), log_iterations=args.log_iterations,
                   on_epoch=on_epoch)
    _write_jsonl(os.path.join(args.out, TRAIN_LOG), result.log)
    if args.log_iterations:
        _write_jsonl(os.path.join(args.out, ITER_LOG), result.iter_log)
    meta = {"data": os.path.abspath(args.data), "users": list(dataset.users),
            "items": list(dataset.items), "beta1": result.state.beta1,
            "beta2": result.state.beta2}
    checkpoint.save(os.path.join(args.out, MODEL), result.stack, meta)
    print(json.dumps(result.log[-1] if result.log else {}, sort_keys=True))


def _load_run(run_dir):
    _need_dir(run_dir, "run")
    path = os.path.join(run_dir, MODEL)
    if not os.path.exists(path):
        raise DataError(f"missing {path}")
    stack, meta = checkpoint.load(path)
    cfg = load_config(os.path.join(run_dir, LOCK))
    return stack, meta, cfg


def cmd_evaluate(args):
    stack, meta, cfg = _load_run(args.run)
    data_dir = args.data or meta["data"]
    dataset, _ = _load_data(data_dir, cfg.seed, cfg.feature_dim)
    if list(dataset.items) != meta["items"] or list(dataset.users) != meta["users"]:
        raise DataError("dataset does not match the one the run was trained on")
    report = evaluate_users(stack, split_leave_last(dataset), args.z or cfg.z, args.phase)
    with open(os.path.join(args.run, METRICS), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, sort_keys=True))


def cmd_export_graph(args):
    stack, meta, _ = _load_run(args.run)
    if args.items:
        W = np.asarray(item_matrix(stack.assign(), stack.graph.Wc))
        doc = export_graph(W, args.threshold, labels=meta["items"])
    else:
        doc = export_graph(np.asarray(stack.graph.Wc), args.threshold)
    if args.out:
        write_graph(args.out, doc)
    else:
        print(json.dumps(doc, indent=2))


def cmd_explain(args):
    stack, meta, cfg = _load_run(args.run)
    dataset, _ = _load_data(meta["data"], cfg.seed, cfg.feature_dim)
    try:
        u = dataset.users.index(args.user)
    except ValueError:
        raise UsageError(f"unknown user {args.user!r}") from None
    try:
        b = dataset.items.index(args.target)
    except ValueError:
        raise UsageError(f"unknown item {args.target!r}") from None
    history = dataset.sequences[u][:-1]
    ex = explain(history, u, b, stack, args.n, args.mode)
    print(json.dumps({
        "user": args.user, "target": args.target, "mode": args.mode,
        "skipped_all": ex.skipped_all,
        "items": [{"step": t, "item": dataset.items[i], "score": s} for t, i, s in ex.items],
    }, indent=2))


def build_parser():
    parser = _Parser(prog="causer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, help="worker threads for gradient shards")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset with a planted cluster DAG")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train on a data directory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-iterations", action="store_true",
                   help="also write the per-iteration multiplier log")
    p.add_argument("--reproducible", action="store_true",
                   help="omit wall-clock fields so identical runs give identical logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank held-out steps and write metrics")
    common(p, config=False)
    p.add_argument("--run", required=True)
    p.add_argument("--data", help="data directory (defaults to the one used in training)")
    p.add_argument("--z", type=int)
    p.add_argument("--phase", choices=["test", "valid"], default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-graph", help="thresholded causal graph as JSON")
    p.add_argument("--run", required=True)
    p.add_argument("--threshold", type=float, default=EXPORT_THRESHOLD)
    p.add_argument("--items", action="store_true", help="item-level instead of cluster-level")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("explain", help="history items that explain a recommendation")
    p.add_argument("--run", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--mode", choices=["full", "no_att", "no_causal"], default="full")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "z", None) is not None and args.z < 1:
        parser.error("--z must be >= 1")
    try:
        args.func(args)
    except TrainingDivergence as exc:
        print(f"causer: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ParseError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"causer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UsageError as exc:
        print(f"causer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
