"""Multi-trial experiments: fresh split, preprocessing and models per trial,
R² / slope per target on the test split, t-intervals across trials.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import TARGET_NAMES
from .featurizer import Backbone, freeze
from .metrics import UndefinedFitError, confidence_interval, r_squared
from .model import KINDS, TrainConfig, build_model, predict_dataset, train
from .pipeline import PreparedDataset, RawDataset, load_dataset, prepare, split
from .plotting import PALETTE, loss_panels, scatter_grid

METRICS_COLUMNS = ("target_index", "kind", "r2_mean", "r2_ci_halfwidth", "slope_mean", "trials")
LOSS_COLUMNS = ("kind", "trial", "epoch", "train_loss", "test_loss", "targets")
PREDICTION_COLUMNS = ("kind", "trial", "sample_id", "target_index", "true", "predicted")
R2_CONVENTION = "squared Pearson correlation of the least-squares fit of predicted on true (test split, physical units)"

KIND_ALIASES = {"dmtlr": "dmtlr", "image": "image_only", "image_only": "image_only",
                "stats": "stats_only", "stats_only": "stats_only"}


def parse_kinds(text: str | Sequence[str]) -> tuple[str, ...]:
    items = text.split(",") if isinstance(text, str) else list(text)
    out = []
    for item in items:
        key = item.strip().lower()
        if key not in KIND_ALIASES:
            raise ValueError(f"unknown model kind {item!r}; choose from dmtlr, image, stats")
        if KIND_ALIASES[key] not in out:
            out.append(KIND_ALIASES[key])
    if not out:
        raise ValueError("no model kinds selected")
    return tuple(k for k in KINDS if k in out)


def parse_targets(text: str | Sequence[int]) -> tuple[int, ...]:
    if isinstance(text, str):
        if text.strip().lower() == "all":
            return tuple(range(1, len(TARGET_NAMES) + 1))
        items = [int(t) for t in text.split(",")]
    else:
        items = [int(t) for t in text]
    for t in items:
        if not 1 <= t <= len(TARGET_NAMES):
            raise ValueError(f"target index {t} outside 1..{len(TARGET_NAMES)}")
    return tuple(sorted(set(items)))


@dataclass
class ExperimentConfig:
    dataset: Path
    output_dir: Path
    backbone: Path | None = None
    kinds: tuple[str, ...] = KINDS
    mode: str = "multi"  # "multi": one model for all targets; "single": one model per target
    targets: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    trials: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    confidence_intervals: bool = True
    threads: int = 1
    plots: bool = True

    def __post_init__(self) -> None:
        self.dataset = Path(self.dataset)
        self.output_dir = Path(self.output_dir)
        self.backbone = Path(self.backbone) if self.backbone is not None else None
        self.kinds = parse_kinds(self.kinds)
        self.targets = parse_targets(self.targets)
        if self.mode not in ("multi", "single"):
            raise ValueError(f"mode must be 'multi' or 'single', got {self.mode!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.confidence_intervals and self.trials < 2:
            raise ValueError("confidence intervals need trials >= 2")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def target_groups(self) -> list[tuple[int, ...]]:
        if self.mode == "multi":
            return [self.targets]
        return [(t,) for t in self.targets]

    @property
    def needs_backbone(self) -> bool:
        return any(k != "stats_only" for k in self.kinds)


@dataclass
class MetricsRow:
    target_index: int
    kind: str
    r2: float
    slope: float
    ci_halfwidth: float
    trials: int
    failures: int = 0


@dataclass
class TrialRun:
    trial: int
    kind: str
    targets: tuple[int, ...]
    train_loss: list[float]
    test_loss: list[float]
    r2: dict[int, float]
    slope: dict[int, float]
    failed: list[int]
    sample_ids: np.ndarray
    true: np.ndarray
    predicted: np.ndarray


@dataclass
class ExperimentResult:
    metrics: list[MetricsRow]
    runs: list[TrialRun]
    files: list[Path]
    backbone: Backbone | None = None

    def mean_r2(self, kind: str) -> float:
        vals = [m.r2 for m in self.metrics if m.kind == kind and np.isfinite(m.r2)]
        return float(np.mean(vals)) if vals else float("nan")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def check_inputs(config: ExperimentConfig) -> None:
    """Fail before any training if inputs or the output location are unusable."""
    manifest = config.dataset / "manifest.csv" if config.dataset.is_dir() else config.dataset
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    if config.needs_backbone:
        if config.backbone is None:
            raise FileNotFoundError("image-bearing model kinds need a pretrained backbone checkpoint")
        if not config.backbone.exists():
            raise FileNotFoundError(f"backbone checkpoint not found: {config.backbone}")
    try:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        probe = config.output_dir / ".write_probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"output directory {config.output_dir} is not writable: {exc}") from exc


def _group_view(data: PreparedDataset, cols: list[int]) -> PreparedDataset:
    # shares images and the backbone feature cache with ``data``
    return replace(data, targets=data.targets[:, cols])


def run_trial(trial: int, raw: RawDataset, backbone: Backbone | None, config: ExperimentConfig,
              log: Callable[[str], None] | None = None) -> list[TrialRun]:
    trial_seed = derive_seed(config.seed, trial)
    plan = split(len(raw), trial_seed)
    input_hw = backbone.spec.input_size[:2] if backbone is not None else None
    indices = [t - 1 for t in config.targets]
    tr, te, pre = prepare(raw, plan, indices, input_hw)
    scale, mean = pre.target_scaler.scale, pre.target_scaler.mean
    tcfg = config.train
    runs = []
    for group in config.target_groups:
        cols = [config.targets.index(t) for t in group]
        tr_g, te_g = _group_view(tr, cols), _group_view(te, cols)
        for k, kind in enumerate(config.kinds):
            model = build_model(kind, backbone, raw.descriptors.shape[1], len(group),
                                seed=derive_seed(config.seed, trial, k, *group))
            cfg = tcfg.with_(seed=trial_seed, n_output=len(group))
            report = train(model, tr_g, te_g, cfg)
            pred = predict_dataset(model, te_g) * scale[cols] + mean[cols]
            true = raw.targets[plan.test][:, [indices[c] for c in cols]]
            r2, slope, failed = {}, {}, []
            for j, t in enumerate(group):
                try:
                    r2[t], slope[t] = r_squared(true[:, j], pred[:, j])
                except UndefinedFitError:
                    failed.append(t)
            runs.append(TrialRun(trial, kind, group, report.train_loss, report.test_loss, r2, slope, failed,
                                 te_g.sample_ids, true, pred))
            if log is not None:
                shown = ", ".join(f"t{t}={r2[t]:.3f}" for t in group if t in r2)
                log(f"trial {trial} {kind} targets {list(group)}: {shown}")
    return runs


def aggregate(runs: Sequence[TrialRun], config: ExperimentConfig) -> list[MetricsRow]:
    rows = []
    for t in config.targets:
        for kind in config.kinds:
            mine = [r for r in runs if r.kind == kind and t in r.targets]
            vals = [r.r2[t] for r in mine if t in r.r2]
            slopes = [r.slope[t] for r in mine if t in r.slope]
            failures = len(mine) - len(vals)
            if len(vals) >= 2:
                mean, half = confidence_interval(vals)
            elif len(vals) == 1:
                mean, half = vals[0], float("nan")
            else:
                mean, half = float("nan"), float("nan")
            slope = float(np.mean(slopes)) if slopes else float("nan")
            rows.append(MetricsRow(t, kind, mean, slope, half, len(vals), failures))
    return rows


def _f(v: float) -> str:
    return repr(float(v))


def write_reports(result_runs: Sequence[TrialRun], metrics: Sequence[MetricsRow],
                  config: ExperimentConfig, backbone: Backbone | None) -> list[Path]:
    out = config.output_dir
    files = []
    path = out / "metrics.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for m in metrics:
            w.writerow([m.target_index, m.kind, _f(m.r2), _f(m.ci_halfwidth), _f(m.slope), m.trials])
    files.append(path)

    path = out / "loss_curves.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in sorted(result_runs, key=lambda r: (r.targets, KINDS.index(r.kind), r.trial)):
            tag = "all" if config.mode == "multi" else str(r.targets[0])
            for e, (a, b) in enumerate(zip(r.train_loss, r.test_loss), start=1):
                w.writerow([r.kind, r.trial, e, _f(a), _f(b), tag])
    files.append(path)

    path = out / "predictions.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for r in sorted(result_runs, key=lambda r: (r.targets, KINDS.index(r.kind), r.trial)):
            for j, t in enumerate(r.targets):
                for sid, a, b in zip(r.sample_ids, r.true[:, j], r.predicted[:, j]):
                    w.writerow([r.kind, r.trial, int(sid), t, _f(a), _f(b)])
    files.append(path)

    meta = {
        "r2_convention": R2_CONVENTION,
        "confidence_interval": "mean ± t(0.975, k-1) · s / sqrt(k), s = sample std over k trials",
        "mode": config.mode,
        "targets": {str(t): TARGET_NAMES[t - 1] for t in config.targets},
        "kinds": list(config.kinds),
        "trials": config.trials,
        "seed": config.seed,
        "train_config": asdict(config.train),
        "failed_fits": [{"kind": r.kind, "trial": r.trial, "target_index": t}
                        for r in result_runs for t in r.failed],
        "backbone_fingerprint": backbone.fingerprint() if backbone is not None else None,
        "plot_colours": {k: list(PALETTE[k]) for k in config.kinds},
        "plot_layout": "scatter_<kind>: one panel per target in index order, predicted (y) vs true (x), "
                       "trial 0; loss_curves: left train, right test, mean over trials",
    }
    path = out / "report.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(path)
    if config.plots:
        files += render_plots(out)
    return files


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def render_plots(output_dir: str | Path) -> list[Path]:
    """Redraw loss and scatter figures from the CSVs in ``output_dir``."""
    out = Path(output_dir)
    files: list[Path] = []
    loss_rows = _read_csv(out / "loss_curves.csv")
    curves: dict[str, dict[int, list[tuple[float, float]]]] = {}
    for row in loss_rows:
        curves.setdefault(row["kind"], {}).setdefault(int(row["epoch"]), []).append(
            (float(row["train_loss"]), float(row["test_loss"])))
    mean_curves = {}
    for kind, by_epoch in curves.items():
        epochs = sorted(by_epoch)
        mean_curves[kind] = ([float(np.mean([a for a, _ in by_epoch[e]])) for e in epochs],
                             [float(np.mean([b for _, b in by_epoch[e]])) for e in epochs])
    if mean_curves:
        files += loss_panels(mean_curves).save(out / "loss_curves")

    pred_rows = [r for r in _read_csv(out / "predictions.csv") if r["trial"] == "0"]
    for kind in KINDS:
        rows = [r for r in pred_rows if r["kind"] == kind]
        if not rows:
            continue
        targets = sorted({int(r["target_index"]) for r in rows})
        by_t = {t: [r for r in rows if int(r["target_index"]) == t] for t in targets}
        n = min(len(v) for v in by_t.values())
        true = np.array([[float(by_t[t][i]["true"]) for t in targets] for i in range(n)])
        pred = np.array([[float(by_t[t][i]["predicted"]) for t in targets] for i in range(n)])
        files += scatter_grid(true, {kind: pred}).save(out / f"scatter_{kind}")
    return files


def run_experiment(config: ExperimentConfig, log: Callable[[str], None] | None = None) -> ExperimentResult:
    check_inputs(config)
    raw = load_dataset(config.dataset)
    backbone = None
    if config.needs_backbone:
        backbone = freeze(Backbone.load(config.backbone))
    trials = range(config.trials)
    if config.threads > 1 and config.trials > 1:
        worker = partial(run_trial, raw=raw, backbone=backbone, config=config)
        with ProcessPoolExecutor(max_workers=min(config.threads, config.trials)) as pool:
            nested = list(pool.map(worker, trials))
    else:
        nested = [run_trial(t, raw, backbone, config, log) for t in trials]
    runs = [r for group in nested for r in group]
    metrics = aggregate(runs, config)
    files = write_reports(runs, metrics, config, backbone)
    return ExperimentResult(metrics, runs, files, backbone)


def threads_from_env(default: int = 1) -> int:
    raw = os.environ.get("DMTLR_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ValueError(f"DMTLR_THREADS must be an integer, got {raw!r}") from exc
