"""``fscm`` command line: simulate, train, eval, predict, inspect-dag.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import metrics
from .data import SchemaError, field_vocab, read_sessions, write_sessions
from .model import ConfigMismatch, load_model, save_model
from .numkit import NonFiniteError
from .page_dag import LayoutError, PageLayout, build_dag, degree_table
from .simulator import SimConfig, simulate
from .trainer import ABLATIONS, TrainConfig, TrainingError, apply_ablation, split_sessions, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("fscm")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _load_config(path: str | None) -> dict:
    """A config file is one JSON document with optional "simulator" and "train" sections."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"config {path}: invalid JSON ({err.msg} at line {err.lineno})") from None
    if not isinstance(doc, dict) or set(doc) - {"simulator", "train"}:
        raise UsageError(f"config {path}: expected an object with 'simulator' and/or 'train' sections")
    return doc


def _write_manifest(out: Path, command: str, config: dict, seed, inputs: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "output": str(out),
        "code_version": _code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_seconds": round(time.time() - started, 3),
    }
    with open(str(out) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read(path: str):
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    try:
        return read_sessions(path)
    except SchemaError as err:
        raise DataError(str(err)) from None


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    started = time.time()
    if args.sessions < 1:
        raise UsageError("--sessions must be at least 1")
    doc = _load_config(args.config)
    try:
        cfg = SimConfig.from_dict(doc.get("simulator", {}))
    except (TypeError, ValueError) as err:
        raise UsageError(f"simulator config: {err}") from None
    pairs = simulate(cfg, args.sessions, args.seed, workers=args.workers)
    sessions = [s for s, _ in pairs]
    if not args.keep_trace:
        for s in sessions:
            s.trace = None
    out = Path(args.out)
    write_sessions(out, sessions)
    _write_manifest(out, "simulate", {"simulator": cfg.to_dict()}, args.seed, {}, started)
    print(f"wrote {len(sessions)} sessions to {out}")
    return EXIT_OK


def _train_config(args, doc: dict) -> TrainConfig:
    section = dict(doc.get("train", {}))
    try:
        base = TrainConfig.desk() if args.desk else TrainConfig()
        cfg = replace(base, **section) if section else base
        overrides = {}
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "seed", "hidden_size", "l2"):
            v = getattr(args, name)
            if v is not None:
                overrides[name] = v
        if args.comparison is not None:
            overrides["comparison"] = args.comparison
        if args.baseline is not None:
            overrides["baseline"] = args.baseline
        cfg = replace(cfg, **overrides)
        return apply_ablation(cfg, args.ablation or [])
    except (TypeError, ValueError) as err:
        raise UsageError(f"training config: {err}") from None


def cmd_train(args) -> int:
    started = time.time()
    doc = _load_config(args.config)
    cfg = _train_config(args, doc)
    sessions = _read(args.data)
    if args.val_data:
        train_s, val_s = sessions, _read(args.val_data)
    else:
        try:
            train_s, val_s = split_sessions(sessions, cfg.val_fraction)
        except TrainingError as err:
            raise DataError(str(err)) from None
    try:
        vocab = field_vocab(sessions)
    except SchemaError as err:
        raise DataError(str(err)) from None
    result = train(train_s, val_s, cfg, vocab=vocab)
    out = Path(args.model_out)
    save_model(out, result.model)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log.jsonl")
    log_path.write_text(result.log_lines())
    _write_manifest(
        out, "train", {"train": cfg.to_dict()}, cfg.seed,
        {"data": args.data, "val_data": args.val_data, "config": args.config}, started,
    )
    print(f"best epoch {result.best_epoch} val_ll {result.best_val_ll:.6f}; model written to {out}")
    return EXIT_OK


def _load(path: str):
    if not os.path.exists(path):
        raise DataError(f"model file not found: {path}")
    try:
        return load_model(path)
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        raise DataError(f"cannot load model {path}: {err}") from None


def cmd_eval(args) -> int:
    started = time.time()
    model = _load(args.model)
    sessions = _read(args.data)
    pred = metrics.predict_items(model, sessions)
    report = metrics.report_from(pred)
    sys.stdout.write(report.to_table())
    if args.report:
        Path(args.report).write_text(report.to_json())
        _write_manifest(Path(args.report), "eval", {}, None, {"data": args.data, "model": args.model}, started)
    if args.emit_plot_data:
        metrics.write_plot_data(args.emit_plot_data, pred)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load(args.model)
    sessions = _read(args.session_file)
    pred = metrics.predict_items(model, sessions)
    order = np.lexsort((np.arange(pred.prob.size), pred.session_index))
    print("session_id\tblock\tposition\tprobability")
    k = 0
    for s in sessions:
        for node in s.nodes:
            print(f"{s.session_id}\t{node.block}\t{node.position}\t{pred.prob[order[k]]:.6f}")
            k += 1
    return EXIT_OK


def cmd_inspect_dag(args) -> int:
    try:
        layout = PageLayout.parse(args.layout)
    except LayoutError as err:
        raise UsageError(str(err)) from None
    dag = build_dag(layout, skip_edges_enabled=not args.no_skip_edges)
    if args.json:
        print(json.dumps(dag.to_dict(), indent=2))
        return EXIT_OK
    print(f"layout {layout}: {len(dag.nodes)} nodes, {len(dag.edges)} edges")
    print(f"{'source':<10}{'target':<10}{'type':<8}{'target class':<14}")
    for e in dag.edges:
        print(f"{str(e.source):<10}{str(e.target):<10}{e.type.label:<8}{dag.node_class[e.target].key:<14}")
    print()
    print(degree_table(dag))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fscm", description="F-shape click model: simulate, train, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate synthetic sessions as line-delimited JSON")
    s.add_argument("--config", help="JSON config file (uses its 'simulator' section)")
    s.add_argument("--sessions", type=int, required=True, help="number of sessions")
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--out", required=True, help="output .jsonl path")
    s.add_argument("--workers", type=int, default=1, help="worker processes")
    s.add_argument("--keep-trace", action="store_true", help="include examination traces")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train FSCM or a baseline")
    t.add_argument("--data", required=True, help="training sessions (.jsonl)")
    t.add_argument("--val-data", help="validation sessions; default holds out the last val_fraction")
    t.add_argument("--config", help="JSON config file (uses its 'train' section)")
    t.add_argument("--model-out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log path (.jsonl)")
    t.add_argument("--ablation", action="append", choices=ABLATIONS, help="repeatable")
    t.add_argument("--baseline", choices=("block-wise", "list-wise"))
    t.add_argument("--comparison", choices=("inner", "neural", "kernel"))
    t.add_argument("--desk", action="store_true", help="desk-scale preset (hidden 32, batch 64, 10 epochs)")
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--hidden-size", type=int)
    t.add_argument("--l2", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report LL and AUC")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--report", help="write the report as JSON")
    e.add_argument("--emit-plot-data", metavar="PATH", help="write per-position CSV series")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="print per-item click probabilities")
    r.add_argument("--model", required=True)
    r.add_argument("--session-file", required=True)
    r.set_defaults(func=cmd_predict)

    d = sub.add_parser("inspect-dag", help="print the examination DAG of a layout")
    d.add_argument("--layout", required=True, help='e.g. "v6,h8,v6,h8,v6"')
    d.add_argument("--no-skip-edges", action="store_true")
    d.add_argument("--json", action="store_true", help="machine-readable output")
    d.set_defaults(func=cmd_inspect_dag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"fscm: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigMismatch) as err:
        print(f"fscm: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (AssertionError, NonFiniteError, TrainingError) as err:
        print(f"fscm: internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
