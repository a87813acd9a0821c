"""Command line entry point: ``dmtlr <generate|pretrain|train|experiment|report>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("dmtlr")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--lr-decay", type=float, default=0.95)
    p.add_argument("--allow-lr-override", action="store_true",
                   help="accept a learning rate outside [1e-4, 1e-3]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--targets", default="all", help="'all' or comma-separated indices 1..6")
    p.add_argument("--mode", choices=("multi", "single"), default="multi")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmtlr", description="Multimodal transfer-learned regression toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic dataset")
    g.add_argument("--count", type=int, default=900)
    g.add_argument("--seed", type=int, default=3)
    g.add_argument("--regime", choices=("target", "source"), default="target")
    g.add_argument("--grid", type=int, default=64)
    g.add_argument("--out", type=Path, default=Path("data/target"))

    p = sub.add_parser("pretrain", help="pretrain and freeze a backbone on a source-regime dataset")
    p.add_argument("--source", type=Path, required=True, help="source-regime dataset directory or manifest")
    p.add_argument("--out", type=Path, default=Path("backbone.ckpt"))
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one model on one split")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--backbone", type=Path)
    t.add_argument("--kind", default="dmtlr", help="dmtlr, image or stats")
    t.add_argument("--out", type=Path, default=Path("runs/train"))
    _add_train_flags(t)

    e = sub.add_parser("experiment", help="multi-trial comparison with R² tables")
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--backbone", type=Path)
    e.add_argument("--kinds", default="dmtlr,image,stats")
    e.add_argument("--trials", type=int, default=5)
    e.add_argument("--out", type=Path, default=Path("runs/experiment"))
    e.add_argument("--no-plots", action="store_true")
    _add_train_flags(e)

    r = sub.add_parser("report", help="re-render plots from an experiment directory")
    r.add_argument("--dir", type=Path, required=True)
    return parser


def _train_config(args, n_output: int):
    from .model import TrainConfig

    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_decay=args.lr_decay,
                       seed=args.seed, n_output=n_output, allow_lr_override=args.allow_lr_override)


def cmd_generate(args) -> int:
    from .datagen import generate_dataset

    m = generate_dataset(args.count, args.regime, args.grid, args.seed, args.out,
                         progress=lambda done, total: log.info("simulated %d/%d", done, total))
    print(f"wrote {len(m)} samples to {m.path}")
    return 0


def cmd_pretrain(args) -> int:
    from .datagen import PARAM_NAMES
    from .featurizer import build_backbone, freeze, pretrain_backbone, quench_time_labels
    from .pipeline import load_dataset

    raw = load_dataset(args.source)
    labels = quench_time_labels(raw.descriptors[:, PARAM_NAMES.index("total_time")])
    bb = build_backbone(seed=args.seed)
    pretrain_backbone(bb, raw.images, labels, epochs=args.epochs, lr=args.lr, seed=args.seed,
                      batch_size=args.batch_size, log=log.info)
    freeze(bb)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    bb.save(args.out)
    rep = bb.source_task_report
    print(f"held-out source accuracy {rep['final_holdout_accuracy']:.3f} "
          f"(chance {rep['chance_accuracy']:.2f}); saved {args.out}")
    return 0


def cmd_train(args) -> int:
    from .featurizer import Backbone, freeze
    from .harness import parse_kinds, parse_targets
    from .metrics import UndefinedFitError, r_squared
    from .model import build_model, predict_dataset, train
    from .pipeline import load_dataset, prepare, split

    (kind,) = parse_kinds(args.kind)
    targets = parse_targets(args.targets)
    if args.mode == "single" and len(targets) != 1:
        raise SystemExit("train --mode single needs exactly one target index")
    raw = load_dataset(args.dataset)
    backbone = None
    if kind != "stats_only":
        if args.backbone is None or not args.backbone.exists():
            raise SystemExit(f"backbone checkpoint required for kind {kind}")
        backbone = freeze(Backbone.load(args.backbone))
    plan = split(len(raw), args.seed)
    tr, te, pre = prepare(raw, plan, [t - 1 for t in targets],
                          backbone.spec.input_size[:2] if backbone else None)
    model = build_model(kind, backbone, raw.descriptors.shape[1], len(targets), seed=args.seed)
    report = train(model, tr, te, _train_config(args, len(targets)), log=log.info)
    args.out.mkdir(parents=True, exist_ok=True)
    model.save(args.out / "model.ckpt")
    with open(args.out / "loss_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,test_loss\n")
        for e, (a, b) in enumerate(zip(report.train_loss, report.test_loss), start=1):
            fh.write(f"{e},{a!r},{b!r}\n")
    true = pre.targets_to_physical(te.targets)
    pred = pre.targets_to_physical(predict_dataset(model, te))
    summary = {}
    for j, t in enumerate(targets):
        try:
            r2, slope = r_squared(true[:, j], pred[:, j])
            summary[t] = {"r2": r2, "slope": slope}
        except UndefinedFitError as exc:
            summary[t] = {"error": str(exc)}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for t, s in summary.items():
        print(f"target {t}: " + (f"R2 {s['r2']:.4f} slope {s['slope']:.4f}" if "r2" in s else s["error"]))
    return 0


def cmd_experiment(args) -> int:
    from .harness import ExperimentConfig, run_experiment, threads_from_env

    cfg = ExperimentConfig(dataset=args.dataset, output_dir=args.out, backbone=args.backbone,
                           kinds=args.kinds, mode=args.mode, targets=args.targets, trials=args.trials,
                           train=_train_config(args, 6), seed=args.seed, threads=threads_from_env(),
                           plots=not args.no_plots)
    result = run_experiment(cfg, log=log.info)
    print(f"{'target':>6} {'kind':>11} {'R2':>8} {'±':>8} {'slope':>7}")
    for m in result.metrics:
        print(f"{m.target_index:>6} {m.kind:>11} {m.r2:8.4f} {m.ci_halfwidth:8.4f} {m.slope:7.3f}")
    for kind in cfg.kinds:
        print(f"mean R2 {kind}: {result.mean_r2(kind):.4f}")
    return 0


def cmd_report(args) -> int:
    from .harness import render_plots

    for f in render_plots(args.dir):
        print(f)
    return 0


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
            "experiment": cmd_experiment, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    np.seterr(over="raise", invalid="raise")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, PermissionError, OSError) as exc:
        print(f"dmtlr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
