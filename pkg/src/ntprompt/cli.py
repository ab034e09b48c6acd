"""Command line entry point: ``ntprompt <verb> ...``.

Verbs
  ingest ROOT              index a root/domain/class/image tree
  train --config C         train baseline + protected model, save checkpoints
  evaluate --config C      evaluate saved checkpoints, write result tables
  run --config C           train then evaluate
  report RUN_DIR...        merge metric tables of several runs (adds Mean rows)
  reproduce-metrics        recompute the published weighted scores

Exit codes: 0 success, 1 other failure (or metric mismatch), 2 config
error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ntprompt import experiment as ex
from ntprompt import reference
from ntprompt.archive import atomic_write_text
from ntprompt.config import load_config
from ntprompt.datasets import ingest_dataset
from ntprompt.errors import NTPromptError

log = logging.getLogger("ntprompt")


def _cmd_ingest(args):
    index = ingest_dataset(args.root)
    n_dom, n_cls, n_img = index.summary()
    payload = {"root": index.root, "index_hash": index.index_hash(), **index.to_dict()}
    if args.out:
        atomic_write_text(args.out, json.dumps(payload, indent=2, sort_keys=True))
    print(f"domains={n_dom} classes={n_cls} images={n_img} index_hash={index.index_hash()}")
    return 0


def _cmd_train(args):
    config = load_config(args.config)
    run = ex.train_run(config)
    print(f"baseline checkpoint {run.sl_hash}")
    print(f"protected checkpoint {run.ip_hash}")
    return 0


def _print_results(table, rows):
    for r in table.rows:
        print(f"{r['role']:<12} {r['domain']:<24} A_sl={r['A_sl']:6.2f}  A_ip={r['A_ip']:6.2f}")
    for r in rows:
        vals = "  ".join(f"{k}={r[k]:.2f}" for k in ex.METRIC_COLUMNS[3:] if r[k] is not None)
        print(f"{r['authorized']:<12} {r['method']:<4} {vals}")


def _cmd_evaluate(args):
    config = load_config(args.config)
    run = ex.load_run(config)
    table, report = ex.evaluate_run(run)
    rows = ex.write_results(config, table, report)
    _print_results(table, rows)
    return 0


def _cmd_run(args):
    config = load_config(args.config)
    result = ex.run_experiment(config)
    _print_results(result.table, result.metric_rows)
    print(f"results hash {result.table.content_hash()}")
    return 0


def _cmd_report(args):
    rows = ex.aggregate_reports(args.run_dirs, args.out)
    for r in rows:
        vals = "  ".join(f"{k}={r[k]:.2f}" for k in ex.METRIC_COLUMNS[3:] if r[k] is not None)
        print(f"{r['scenario']:<18} {r['authorized']:<12} {r['method']:<4} {vals}")
    print(f"wrote {Path(args.out) / 'metrics.csv'} and metrics.json")
    return 0


def _cmd_reproduce(args):
    checks = reference.reproduce_all()
    ok = True
    for c in checks:
        status = "ok" if c.passed else "MISMATCH"
        ok &= c.passed
        print(f"{c.table:<17} {c.row:<16} {c.metric:<5} expected={c.expected:7.2f} got={c.computed:8.3f}  {status}")
    print("all published scores reproduced" if ok else "some published scores were not reproduced")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="ntprompt", description="Non-transferable prompt learning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("ingest", help="index a root/domain/class/image dataset tree")
    s.add_argument("root")
    s.add_argument("--out", help="write the index (with its hash) to this JSON file")
    s.set_defaults(func=_cmd_ingest)

    for name, func, text in (
        ("train", _cmd_train, "train the baseline and protected models"),
        ("evaluate", _cmd_evaluate, "evaluate saved checkpoints and write result tables"),
        ("run", _cmd_run, "train and evaluate"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="run config YAML")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="merge metric tables of several runs")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--out", required=True, help="directory for the merged metrics.csv/json")
    s.set_defaults(func=_cmd_report)

    s = sub.add_parser("reproduce-metrics", help="recompute the published weighted scores")
    s.set_defaults(func=_cmd_reproduce)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NTPromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
