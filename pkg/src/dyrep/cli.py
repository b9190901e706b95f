"""``dyrep`` command line: train, export, verify, score-report."""

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build, resolve
from .data import DataFormatError, load_source
from .models import build_model
from .serialization import ContainerError, canonical_json
from .trainer import (TrainingDiverged, export_inference, load_checkpoint, save_checkpoint,
                      train, verify_model)

log = logging.getLogger("dyrep")

RUN_ROOT_ENV = "DYREP_RUN_ROOT"
RUN_FILES = ("manifest.json", "metrics.jsonl", "structure.jsonl", "scores.csv", "diverged.ckpt")
RUN_DIRS = ("checkpoints",)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def run_dir_for(args):
    if args.run_dir:
        return Path(args.run_dir)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    name = args.name or Path(args.config).stem
    return root / name


def _reset_run_dir(run_dir):
    # re-running a command must leave the same bytes behind, so stale logs go first
    run_dir.mkdir(parents=True, exist_ok=True)
    for f in RUN_FILES:
        (run_dir / f).unlink(missing_ok=True)
    for d in RUN_DIRS:
        shutil.rmtree(run_dir / d, ignore_errors=True)


def cmd_train(args):
    try:
        values = resolve(args.config, args.set or [])
        rc = build(values)
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    run_dir = run_dir_for(args)
    try:
        train_data, test_data = load_source(rc.data, rc.train.dtype)
    except (OSError, DataFormatError, ValueError) as exc:
        _err(f"cannot load data: {exc}")
        return EXIT_FAIL
    _reset_run_dir(run_dir)
    manifest = {
        "artifact_version": __version__,
        "config": values,
        "config_hash": rc.hash,
        "layout": {"metrics": "metrics.jsonl", "structure": "structure.jsonl", "scores": "scores.csv",
                   "checkpoints": "checkpoints/", "final_checkpoint": "checkpoints/final.ckpt"},
    }
    (run_dir / "manifest.json").write_text(canonical_json(manifest) + "\n")
    model = build_model(rc.model, rc.train.seed, rc.train.dtype)
    try:
        state, history = train(model, train_data, rc.train, test_data, run_dir=run_dir,
                               checkpoint_every=rc.checkpoint_every)
    except TrainingDiverged as exc:
        _err(f"{exc}; diagnostic checkpoint at {run_dir / 'diverged.ckpt'}")
        return EXIT_DIVERGED
    (run_dir / "structure.jsonl").touch()
    save_checkpoint(run_dir / "checkpoints" / "final.ckpt", state, rc.train,
                    {"data": rc.data.to_dict()})
    last = history[-1]
    print(f"run {run_dir}: {len(history)} epochs, final eval accuracy {last['eval_accuracy']:.4f}, "
          f"params {last['params']}")
    return EXIT_OK


def _load(path):
    try:
        return load_checkpoint(path), None
    except FileNotFoundError:
        return None, f"checkpoint not found: {path}"
    except ContainerError as exc:
        return None, f"corrupt checkpoint {path}: section {exc.section}: {exc}"


def cmd_export(args):
    loaded, msg = _load(args.checkpoint)
    if msg:
        _err(msg)
        return EXIT_FAIL
    state = loaded[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    deployed = export_inference(state.model, out)
    print(f"exported {out}: {deployed.num_parameters()} parameters, {len(state.model.blocks())} blocks collapsed")
    return EXIT_OK


def cmd_verify(args):
    loaded, msg = _load(args.checkpoint)
    if msg:
        _err(msg)
        return EXIT_FAIL
    state, _, _, probes = loaded
    results = verify_model(state.model, probes, args.tol)
    if not results:
        print("no live blocks; nothing to verify")
        return EXIT_OK
    for block_id, dev, ok in results:
        print(f"{block_id}\tmax_abs_dev={dev:.3e}\t{'ok' if ok else 'FAIL'}")
    failed = [b for b, _, ok in results if not ok]
    if failed:
        _err(f"equivalence check failed for block(s): {', '.join(failed)}")
        return EXIT_FAIL
    return EXIT_OK


def read_score_table(path):
    """``(metrics, rows)`` with one row per (interval, op_id)."""
    rows, metrics = {}, []
    if not path.exists():
        return metrics, []
    with path.open(newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (int(rec["interval"]), rec["op_id"])
            row = rows.setdefault(key, {"interval": key[0], "op_id": key[1], "chosen": False, "scores": {}})
            row["scores"][rec["metric"]] = float(rec["score"])
            row["chosen"] = row["chosen"] or rec["chosen"] == "1"
            if rec["metric"] not in metrics:
                metrics.append(rec["metric"])
    return metrics, [rows[k] for k in sorted(rows)]


def render_score_table(metrics, rows):
    header = ["interval", "op_id"] + metrics + ["chosen"]
    body = [[str(r["interval"]), r["op_id"]] + [f"{r['scores'][m]:.6g}" if m in r["scores"] else "-" for m in metrics]
            + ["*" if r["chosen"] else ""] for r in rows]
    widths = [max(len(c) for c in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header] + body]
    return "\n".join(lines)


def cmd_score_report(args):
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        _err(f"run directory not found: {run_dir}")
        return EXIT_FAIL
    metrics, rows = read_score_table(run_dir / "scores.csv")
    print(render_score_table(metrics, rows))
    return EXIT_OK


def make_parser():
    p = argparse.ArgumentParser(prog="dyrep", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config", help="YAML config with flat dotted keys")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--run-dir", help=f"output directory (default ${RUN_ROOT_ENV}/<name>)")
    t.add_argument("--name", help="run name under the run root (default: config file stem)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("export", help="collapse a checkpoint to the original topology and write float32")
    e.add_argument("checkpoint")
    e.add_argument("out")
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("verify", help="check every live block against its collapsed conv")
    v.add_argument("checkpoint")
    v.add_argument("--tol", type=float, default=None, help="max abs deviation (default depends on precision)")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("score-report", help="tabulate per-interval saliency scores of a run")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_score_report)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(over="ignore", invalid="ignore")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
