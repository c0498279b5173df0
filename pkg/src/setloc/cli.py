"""Command-line entry point.

Every command is a pure function of (config, flags, input files, seed) to
(output files, exit code). Exit codes: 0 success, 2 config or argument
validation failure, 3 runtime failure (missing or malformed files,
non-finite numerics).
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import Counter

import numpy as np

from .config import PRESETS, dump_config, load_run_config
from .data import load_dataset, save_dataset, synthesize_dataset
from .diagnostics import GRADCHECK_CSV_COLUMNS, gradcheck_suite
from .errors import ContractError, DatasetFormatError, NumericError, ShapeError
from .evaluation import (
    matched_segment_pairs,
    segmentation_error_analysis,
    write_analysis_csv,
    write_detections_csv,
)
from .model import Model, load_model
from .trainer import evaluate_model, predict_corpus, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _add_config_flags(parser):
    parser.add_argument("--preset", choices=sorted(PRESETS), help="named hyperparameter bundle")
    parser.add_argument("--config", help="JSON config file layered over the preset")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path override, e.g. --set train.lr=1e-4 (repeatable)",
    )


def _config(args):
    return load_run_config(args.preset, args.config, args.overrides)


def cmd_synth(args) -> int:
    cfg = _config(args)
    records = synthesize_dataset(cfg.synth)
    save_dataset(records, args.out)
    n_inst = sum(len(r.annotations) for r in records)
    overlapping = 0
    for r in records:
        for i, a in enumerate(r.annotations):
            if any(
                a.start < b.end and b.start < a.end
                for j, b in enumerate(r.annotations)
                if j != i
            ):
                overlapping += 1
    classes = Counter(a.label for r in records for a in r.annotations)
    print(f"wrote {args.out}")
    print(f"videos: {len(records)}")
    print(f"instances: {n_inst}")
    print(f"overlapping instances: {overlapping} ({overlapping / max(1, n_inst):.2%})")
    print("class histogram: " + ", ".join(f"{c}:{n}" for c, n in sorted(classes.items())))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    records = load_dataset(args.data)
    eval_records = load_dataset(args.eval_data) if args.eval_data else records
    model = Model(cfg.model, np.random.default_rng(cfg.train.seed))
    result = train(
        model,
        records,
        cfg.train,
        out_dir=args.out,
        eval_records=eval_records,
        eval_thresholds=cfg.eval_thresholds,
        resume_from=args.resume,
        log=print,
    )
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.eval_history:
        step, report = result.eval_history[-1]
        print(f"final eval (step {step}): avg mAP {report.avg_map:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, _, _ = load_model(args.checkpoint)
    records = load_dataset(args.data)
    report = evaluate_model(model, records, cfg.eval_thresholds, cfg.score_threshold)
    print(report.table())
    if args.out:
        report.write_csv(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    model, _, _ = load_model(args.checkpoint)
    records = load_dataset(args.data)
    detections, _, _ = predict_corpus(model, records, cfg.score_threshold)
    write_detections_csv(detections, args.out)
    print(f"wrote {args.out} ({len(detections)} detections)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    rows = gradcheck_suite(cfg.model, seed=cfg.train.seed)
    worst = 0.0
    for module, target, err in rows:
        print(f"{module:24s} {target:16s} max rel error {err:.3e}")
        worst = max(worst, err)
    print(f"worst: {worst:.3e}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(GRADCHECK_CSV_COLUMNS)
            writer.writerows(rows)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    model, _, _ = load_model(args.checkpoint)
    records = load_dataset(args.data)
    _, ground_truth, by_video = predict_corpus(model, records, cfg.score_threshold)
    pairs = matched_segment_pairs(ground_truth, by_video, cfg.train.weights)
    points, bins = segmentation_error_analysis(pairs, n_bins=args.bins)
    write_analysis_csv(bins, args.out)
    print(f"wrote {args.out} ({len(points)} matched instances)")
    for lo, hi, count, _, mean_err in bins:
        bar = "" if count == 0 else f"  mean L1 {mean_err:.4f}"
        print(f"duration [{lo:.1f}, {hi:.1f}): {count:4d} instances{bar}")
    return EXIT_OK


def cmd_dump_config(args) -> int:
    cfg = _config(args)
    text = dump_config(cfg)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setloc",
        description="Set-prediction temporal action localization: synthesize data, "
        "train, evaluate, predict, verify gradients, analyze errors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    _add_config_flags(p)
    p.add_argument("-o", "--out", required=True, help="output dataset path")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset file")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="training dataset path")
    p.add_argument("--eval-data", help="held-out dataset for periodic evaluation")
    p.add_argument("--out", required=True, help="directory for checkpoints and CSVs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", help="report CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="write detections for a dataset as CSV")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", required=True, help="detections CSV path")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    _add_config_flags(p)
    p.add_argument("-o", "--out", help="per-module error CSV path")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("analyze", help="segment error versus instance duration")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", required=True, help="binned analysis CSV path")
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("dump-config", help="print the fully resolved config JSON")
    _add_config_flags(p)
    p.add_argument("-o", "--out", help="write to a file instead of stdout")
    p.set_defaults(fn=cmd_dump_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DatasetFormatError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
