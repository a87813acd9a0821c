"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The headline experiment (criteria 2, 5, 6 and 8) is built once per module:
source and target datasets are simulated, a backbone is pretrained on the
source set, and the three-way comparison runs on the target set. The whole
pipeline is then repeated from scratch to check bit-for-bit determinism.
"""

import hashlib
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import TINY_SPEC
from dmtlr.datagen import PARAM_NAMES, generate_dataset, run_simulations, sample_params
from dmtlr.featurizer import Backbone, build_backbone, freeze, pretrain_backbone, quench_time_labels
from dmtlr.formats import read_checkpoint
from dmtlr.harness import ExperimentConfig, run_experiment
from dmtlr.metrics import confidence_interval, r_squared
from dmtlr.model import TrainConfig, build_dmtlr, train
from dmtlr.nn import Conv2D, Dense, Flatten, MaxPool2D, Sequential, gradient_check
from dmtlr.pipeline import SplitPlan, StandardScaler, load_dataset, prepare, split

# headline experiment settings
SOURCE_COUNT, SOURCE_SEED = 400, 11
TARGET_COUNT, TARGET_SEED = 900, 3
PRETRAIN_EPOCHS, PRETRAIN_LR, PRETRAIN_SEED = 10, 1e-3, 0
EXPERIMENT = TrainConfig(epochs=20, batch_size=32, lr=1e-3, lr_decay=0.95)
TRIALS = 3


def _hash_arrays(arrays):
    h = hashlib.sha256()
    for w, b in arrays:
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return h.hexdigest()


def _headline(root):
    started = time.perf_counter()
    generate_dataset(SOURCE_COUNT, "source", 64, SOURCE_SEED, root / "source")
    generate_dataset(TARGET_COUNT, "target", 64, TARGET_SEED, root / "target")
    src = load_dataset(root / "source")
    labels = quench_time_labels(src.descriptors[:, PARAM_NAMES.index("total_time")])
    bb = pretrain_backbone(build_backbone(seed=PRETRAIN_SEED), src.images, labels,
                           epochs=PRETRAIN_EPOCHS, lr=PRETRAIN_LR, seed=PRETRAIN_SEED)
    freeze(bb).save(root / "backbone.ckpt")
    w_f_before = _hash_arrays(read_checkpoint(root / "backbone.ckpt")[1]["w_f"])
    cfg = ExperimentConfig(dataset=root / "target", output_dir=root / "experiment",
                           backbone=root / "backbone.ckpt", kinds="dmtlr,image,stats", mode="multi",
                           targets="all", trials=TRIALS, train=EXPERIMENT, seed=0)
    result = run_experiment(cfg)
    elapsed = time.perf_counter() - started
    w_f_after = _hash_arrays([p.arrays() for p in result.backbone.conv_params])
    return {"root": root, "result": result, "elapsed": elapsed, "w_f": (w_f_before, w_f_after),
            "metrics": (root / "experiment" / "metrics.csv").read_bytes(), "pretrain": bb.source_task_report}


@pytest.fixture(scope="module")
def headline(tmp_path_factory):
    return _headline(tmp_path_factory.mktemp("headline"))


# -- 1 ---------------------------------------------------------------------


def test_criterion_1_gradient_fidelity(record_criterion):
    started = time.perf_counter()
    r = np.random.default_rng(0)
    errors = {}
    dense = Sequential([Dense(6, 8, "relu", rng=r), Dense(8, 5, "relu", rng=r), Dense(5, 3, "linear", rng=r)])
    for layer in dense:
        layer.params.biases[...] = r.normal(0, 0.1, size=layer.params.biases.shape)
    errors["dense"] = gradient_check(dense, r.normal(size=(7, 6)), r.normal(size=(7, 3)))
    conv = Sequential([Conv2D(3, 4, 3, rng=r), MaxPool2D(2), Conv2D(4, 4, 3, padding="valid", rng=r),
                       MaxPool2D(2), Flatten(), Dense(16, 6, "relu", rng=r), Dense(6, 2, "linear", rng=r)])
    errors["conv"] = gradient_check(conv, r.normal(size=(3, 12, 12, 3)), r.normal(size=(3, 2)))
    model = build_dmtlr(freeze(build_backbone(TINY_SPEC, seed=5)), 18, 6, seed=5)
    x, d = r.uniform(-128, 128, size=(4, 32, 32, 3)), r.normal(size=(4, 18))
    errors["dmtlr"] = gradient_check(model, (x, d), r.normal(size=(4, 6)), max_samples=40)
    elapsed = time.perf_counter() - started
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errors.items()) + f"; {elapsed:.1f} s"
    record_criterion(1, "gradient check < 1e-4, < 30 s", worst < 1e-4 and elapsed < 30, detail)


# -- 2 ---------------------------------------------------------------------


def test_criterion_2_frozen_transfer(headline, record_criterion):
    before, after = headline["w_f"]
    record_criterion(2, "w_f hash unchanged after 20-epoch training", before == after,
                     f"sha256 {before[:12]}.. -> {after[:12]}..")


# -- 3 ---------------------------------------------------------------------


def test_criterion_3_memorization(tmp_path, record_criterion):
    """Default DMTL-R (fusion dropout 0.5) on 32 rows, 500 full-batch epochs at lr 1e-3.

    The training rows double as the evaluation set, so ``test_loss`` is the
    eval-mode train MSE after every epoch; the criterion asks whether it
    drops below 1e-2 at any point within the 500 epochs.
    """
    started = time.perf_counter()
    generate_dataset(32, "target", 64, 17, tmp_path)
    raw = load_dataset(tmp_path)
    plan = SplitPlan(train=np.arange(32), test=np.arange(32), seed=0)  # all 32 rows train
    tr, _, _ = prepare(raw, plan)
    model = build_dmtlr(freeze(build_backbone(seed=0)), 18, 6, seed=0)
    report = train(model, tr, tr, TrainConfig(epochs=500, batch_size=32, lr=1e-3, lr_decay=1.0))
    elapsed = time.perf_counter() - started
    curve = np.array(report.test_loss)
    best = float(curve.min())
    record_criterion(3, "32-sample train MSE < 1e-2 within 500 epochs, < 2 min", best < 1e-2 and elapsed < 120,
                     f"best eval-mode train MSE {best:.2e} at epoch {int(curve.argmin()) + 1}, "
                     f"final {curve[-1]:.2e}, final train-mode {report.train_loss[-1]:.2e}; {elapsed:.1f} s")


# -- 4 ---------------------------------------------------------------------


def test_criterion_4_simulator_physics(record_criterion):
    started = time.perf_counter()
    r = np.random.default_rng(2024)
    params = [sample_params(r, "target" if i % 2 == 0 else "source") for i in range(100)]
    rngs = [np.random.default_rng(np.random.SeedSequence([2024, i])) for i in range(100)]
    fields = run_simulations(params, 64, rngs, record_every=50)
    drift = max(abs(f.grid.mean() - p.c0) for f, p in zip(fields, params))
    rise = max(float(np.max(np.diff(f.energies))) for f in fields)
    checkpoints = min(len(f.energies) for f in fields)
    elapsed = time.perf_counter() - started
    ok = drift < 1e-10 and rise <= 1e-8 and checkpoints >= 2 and elapsed < 180
    record_criterion(4, "mass drift < 1e-10, energy non-increasing, < 3 min", ok,
                     f"max drift {drift:.1e}, max energy rise {rise:.1e}, >= {checkpoints} checkpoints; "
                     f"{elapsed:.1f} s")


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_headline_ordering(headline, record_criterion):
    res = headline["result"]
    means = {k: res.mean_r2(k) for k in ("dmtlr", "image_only", "stats_only")}
    ok = (means["dmtlr"] >= means["stats_only"] and means["dmtlr"] >= means["image_only"]
          and means["dmtlr"] >= 0.75 and headline["elapsed"] < 600)
    detail = ", ".join(f"{k} {v:.4f}" for k, v in means.items()) + f"; {headline['elapsed']:.0f} s"
    record_criterion(5, "DMTL-R >= stats-only, >= image-only, >= 0.75, < 10 min", ok, detail)


# -- 6 ---------------------------------------------------------------------


def test_criterion_6_loss_curve_shape(headline, record_criterion):
    runs = [r for r in headline["result"].runs if r.kind == "dmtlr"]
    ratios = [r.test_loss[-1] / r.train_loss[-1] for r in runs]
    good = sum(q <= 1.5 for q in ratios)
    record_criterion(6, "final test <= 1.5 x final train in >= 2 of 3 trials", good >= 2 and len(runs) == 3,
                     "ratios " + ", ".join(f"{q:.3f}" for q in ratios))


# -- 7 ---------------------------------------------------------------------


def test_criterion_7_metric_correctness(record_criterion):
    r2, slope = r_squared([0, 1, 2], [0.1, 0.9, 2.1])
    # exact rational OLS: sxy = 2, sxx = 2, syy = 1824/900
    want = Fraction(2) ** 2 / (Fraction(2) * Fraction(1824, 900))
    err_r2 = abs(r2 - float(want))
    err_slope = abs(slope - 1.0)
    mean, half = confidence_interval([0.9, 1.1])
    err_ci = max(abs(mean - 1.0), abs(half - math.tan(math.pi * 0.475) * 0.1))
    perfect = r_squared([0.5, 1.5, 4.0], [0.5, 1.5, 4.0])
    ok = max(err_r2, err_slope, err_ci) < 1e-12 and perfect == (1.0, 1.0)
    record_criterion(7, "metrics match closed-form oracles to 1e-12", ok,
                     f"r2 err {err_r2:.1e}, slope err {err_slope:.1e}, CI err {err_ci:.1e}, perfect {perfect}")


# -- 8 ---------------------------------------------------------------------


def test_criterion_8_determinism(headline, tmp_path, record_criterion):
    again = _headline(tmp_path)
    same = again["metrics"] == headline["metrics"]
    record_criterion(8, "repeating criterion 5 reproduces metrics.csv bit-for-bit", same,
                     f"{len(headline['metrics'])} bytes, sha256 {hashlib.sha256(headline['metrics']).hexdigest()[:12]}..")


# -- 9 ---------------------------------------------------------------------


def test_criterion_9_pipeline_hygiene(headline, record_criterion):
    raw = load_dataset(headline["root"] / "target")
    plan = split(len(raw), 0)
    tr, _, pre = prepare(raw, plan)
    x = raw.descriptors
    roundtrip = float(np.max(np.abs(pre.descriptor_scaler.inverse_transform(pre.descriptor_scaler.transform(x)) - x)))
    y = raw.targets
    s = StandardScaler().fit(y)
    roundtrip = max(roundtrip, float(np.max(np.abs(s.inverse_transform(s.transform(y)) - y))))
    mean_err = max(float(np.max(np.abs(tr.descriptors.mean(axis=0)))), float(np.max(np.abs(tr.targets.mean(axis=0)))))
    var_err = max(float(np.max(np.abs(tr.descriptors.var(axis=0) - 1))), float(np.max(np.abs(tr.targets.var(axis=0) - 1))))
    big = split(2500, 0)
    sizes = (len(big.train), len(big.test))
    ok = roundtrip < 1e-9 and mean_err < 1e-9 and var_err < 1e-6 and sizes == (1667, 833)
    record_criterion(9, "scaler round-trip, train-split moments, split sizes", ok,
                     f"round-trip {roundtrip:.1e}, |mean| {mean_err:.1e}, |var-1| {var_err:.1e}, "
                     f"n=2500 -> {sizes[0]}/{sizes[1]}")


# -- supporting property -----------------------------------------------------


def test_pretrained_backbone_beats_random_frozen_backbone(headline):
    """A pretrained frozen backbone gives test MSE no worse than a random one in >= 2 of 3 seeds."""
    raw = load_dataset(headline["root"] / "target")
    tr, te, _ = prepare(raw, split(len(raw), 0))
    pretrained = freeze(Backbone.load(headline["root"] / "backbone.ckpt"))
    wins = 0
    for seed in range(3):
        random_bb = freeze(build_backbone(seed=100 + seed))
        cfg = EXPERIMENT.with_(seed=seed)
        a = train(build_dmtlr(pretrained, 18, 6, seed=seed), tr, te, cfg).test_loss[-1]
        b = train(build_dmtlr(random_bb, 18, 6, seed=seed), tr, te, cfg).test_loss[-1]
        wins += a <= b
    assert wins >= 2
