"""Command-line entry points.

Subcommands:

  synth       generate a seeded synthetic witness dataset
  train       fit a model from a JSON config and a dataset manifest
  eval        score a checkpoint on one split, with report files
  gradcheck   run the finite-difference verification suites
  bench-scan  time the selective scan across sequence lengths

Exit codes: 0 success, 2 invalid arguments or configuration, 3 malformed
data file, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import SPLITS, load_manifest, synth_generate
from .errors import FormatError, NumericError, ValidationError
from .gradcheck import SCOPES, run_scope
from .model import build_model
from .numerics import Tensor
from .report import render_bench, render_history, render_risk, render_roc, write_tsv
from .ssm import scan
from .train import evaluate_checkpoint, save_checkpoint, train

BENCH_HEADS = 4
BENCH_HEAD_DIM = 32
BENCH_STATE_DIM = 32


def cmd_synth(args) -> int:
    n = args.n_bags
    if n < 4:
        raise ValidationError(f"--n-bags must be at least 4, got {n}")
    n_val = max(1, n // 4)
    n_test = max(1, n // 4)
    n_train = n - n_val - n_test
    manifest_path = synth_generate(
        args.out,
        task=args.task,
        n_train=n_train,
        n_val=n_val,
        n_test=n_test,
        input_dim=args.dim,
        witness_shift=args.witness_shift,
        seed=args.seed,
    )
    print(manifest_path)
    return 0


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return raw


def cmd_train(args) -> int:
    raw = _load_json(args.config)
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")
    manifest = load_manifest(args.manifest)

    model_raw = dict(raw.get("model", {}))
    model_raw.setdefault("input_dim", manifest.dim)
    has_labels = bool(manifest.bags) and manifest.bags[0].label is not None
    model_raw.setdefault("task", "classification" if has_labels else "survival")
    config = ModelConfig.from_dict(model_raw)
    if config.input_dim != manifest.dim:
        raise ValidationError(
            f"config input_dim {config.input_dim} does not match manifest dim {manifest.dim}"
        )
    if manifest.bags and (config.task == "classification") != has_labels:
        raise ValidationError(
            f"config task {config.task!r} does not match the manifest's targets"
        )
    tcfg = TrainConfig.from_dict(raw.get("train", {}))

    model = build_model(config)
    print(f"parameters: {model.num_parameters()}")

    result = train(model, manifest, tcfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.ckpt", model, extra={
        "monitor": result.monitor,
        "best_epoch": result.best_epoch,
        "best_value": result.best_value,
        "epochs_run": result.epochs_run,
    })
    columns = list(result.history[0].keys())
    write_tsv(out / "history.tsv", columns, result.history)
    render_history(result.history, columns, out / "history.png")

    tail = " (stopped early)" if result.stopped_early else ""
    print(
        f"best {result.monitor} {result.best_value:.6f} at epoch {result.best_epoch}; "
        f"ran {result.epochs_run} epochs{tail}"
    )
    print(out / "checkpoint.ckpt")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    report, rows, model = evaluate_checkpoint(args.checkpoint, manifest, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent
    out.mkdir(parents=True, exist_ok=True)

    (out / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    if model.config.task == "classification":
        columns = ["bag_id", "label", "prob", "pred", "loss"]
        write_tsv(out / "predictions.tsv", columns, rows)
        labels = [row["label"] for row in rows]
        if len(set(labels)) == 2:
            render_roc(labels, [row["prob"] for row in rows], out / "roc.png")
    else:
        columns = ["bag_id", "time_bin", "event", "risk", "loss"]
        write_tsv(out / "predictions.tsv", columns, rows)
        render_risk(
            [row["time_bin"] for row in rows],
            [row["event"] for row in rows],
            [row["risk"] for row in rows],
            out / "risk.png",
        )
    sys.stdout.write(report.to_tsv())
    return 0


def cmd_gradcheck(args) -> int:
    results = run_scope(args.scope, seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.error:11.4e}  tol {r.tolerance:.0e}  {flag}")
    failures = [r for r in results if not r.passed]
    print(f"{len(results) - len(failures)}/{len(results)} checks passed")
    if failures:
        raise NumericError(
            f"{len(failures)} gradient checks failed: "
            + ", ".join(r.name for r in failures)
        )
    return 0


def _parse_lengths(text: str) -> list[int]:
    try:
        lengths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ValidationError(f"--lengths must be comma-separated integers, got {text!r}") from exc
    if not lengths or min(lengths) < 1:
        raise ValidationError(f"--lengths must name positive lengths, got {text!r}")
    return lengths


def cmd_bench_scan(args) -> int:
    lengths = _parse_lengths(args.lengths)
    rng = np.random.default_rng(args.seed)
    rows = []
    print("length\tmedian_seconds")
    for m in lengths:
        x = Tensor(rng.standard_normal((m, BENCH_HEADS, BENCH_HEAD_DIM)))
        b = Tensor(rng.standard_normal((m, BENCH_STATE_DIM)))
        c = Tensor(rng.standard_normal((m, BENCH_STATE_DIM)))
        delta = Tensor(rng.uniform(0.05, 0.2, size=(m, BENCH_HEADS)))
        a = Tensor(-rng.uniform(0.5, 1.5, size=BENCH_HEADS))
        times = []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            scan(x, b, c, delta, a)
            times.append(time.perf_counter() - t0)
        median = statistics.median(times)
        rows.append({"length": m, "median_seconds": median})
        print(f"{m}\t{median:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_tsv(out / "bench.tsv", ["length", "median_seconds"], rows)
        render_bench([r["length"] for r in rows],
                     [r["median_seconds"] for r in rows], out / "bench.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topomil",
        description="Topology-aware multiple-instance learning reference engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic witness dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-bags", type=int, default=40)
    p.add_argument("--task", choices=("classification", "survival"),
                   default="classification")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=32, help="instance feature width")
    p.add_argument("--witness-shift", type=float, default=3.0,
                   help="witness feature offset; 0 gives a null control")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="JSON file with model/train sections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", help="output directory (default: checkpoint directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="time the selective scan")
    p.add_argument("--lengths", default="4096,8192,16384")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for bench.tsv and bench.png")
    p.set_defaults(func=cmd_bench_scan)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
