"""Multimodal regressor: frozen image featurizer + descriptor MLP + fusion head.

Three variants share one class and one training loop:

* ``dmtlr``      image branch u(x1) and descriptor branch v(x2), concatenated
* ``image_only`` image branch only
* ``stats_only`` dense stack on the descriptors only
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import formats
from .featurizer import Backbone, BackboneSpec, build_backbone, build_head, freeze, load_params
from .nn import (AdamState, Concat, Dense, Dropout, ParamSet, Sequential, ShapeError,
                 adam_step, mse_loss, zero_grads)
from .pipeline import PreparedDataset, batches

KINDS = ("dmtlr", "image_only", "stats_only")
FUSION_DIMS = (1000, 100)
DESCRIPTOR_DIMS = (100, 50)
STATS_ONLY_DIMS = (100, 100, 50)
GROUPS = ("w_f", "w_FT", "w_MLP", "w_r")


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _dense_stack(dims, rng, prefix, dropout: float = 0.0, final_linear: bool = False) -> Sequential:
    layers = []
    pairs = list(zip(dims[:-1], dims[1:]))
    for i, (a, b) in enumerate(pairs):
        last = i == len(pairs) - 1
        act = "linear" if (last and final_linear) else "relu"
        layers.append(Dense(a, b, act, rng=rng, name=f"{prefix}_dense{i + 1}"))
        if dropout > 0.0 and not last:
            layers.append(Dropout(dropout, name=f"{prefix}_dropout{i + 1}"))
    return Sequential(layers)


class DMTLRModel:
    def __init__(self, kind: str, n_output: int, d_descriptor: int = 0,
                 backbone: Backbone | None = None, head: Sequential | None = None,
                 descriptor_branch: Sequential | None = None, fusion: Sequential | None = None,
                 dropout_rate: float = 0.5, seed: int = 0):
        self.kind = kind
        self.n_output = n_output
        self.d_descriptor = d_descriptor
        self.backbone = backbone
        self.head = head
        self.descriptor_branch = descriptor_branch
        self.fusion = fusion
        self.dropout_rate = dropout_rate
        self.seed = seed
        self.concat = Concat()

    # -- structure -------------------------------------------------------

    @property
    def uses_images(self) -> bool:
        return self.backbone is not None

    @property
    def uses_descriptors(self) -> bool:
        return self.descriptor_branch is not None

    @property
    def fusion_input_width(self) -> int:
        return self.fusion.layers[0].in_dim

    @property
    def output_layer(self) -> Dense:
        return self.fusion.layers[-1]

    def param_groups(self) -> dict[str, list[ParamSet]]:
        return {
            "w_f": self.backbone.conv_params if self.backbone else [],
            "w_FT": self.head.param_sets() if self.head else [],
            "w_MLP": self.descriptor_branch.param_sets() if self.descriptor_branch else [],
            "w_r": self.fusion.param_sets(),
        }

    def param_sets(self) -> list[ParamSet]:
        return [p for g in GROUPS for p in self.param_groups()[g]]

    def trainable_params(self) -> list[ParamSet]:
        return [p for p in self.param_sets() if p.trainable]

    def n_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_params() if trainable_only else self.param_sets()
        return sum(p.size for p in ps)

    # -- forward / backward ----------------------------------------------

    def _check_batch(self, images, descriptors) -> int:
        sizes = []
        if self.uses_images:
            if images is None:
                raise ValueError(f"{self.kind} model needs an image batch")
            sizes.append(len(images))
        if self.uses_descriptors:
            if descriptors is None:
                raise ValueError(f"{self.kind} model needs a descriptor batch")
            if descriptors.ndim != 2 or descriptors.shape[1] != self.d_descriptor:
                raise ShapeError(f"descriptors must be (batch, {self.d_descriptor}), got {descriptors.shape}")
            sizes.append(len(descriptors))
        if len(set(sizes)) > 1:
            raise ValueError(f"batch sizes differ between modes: images {sizes[0]}, descriptors {sizes[1]}")
        return sizes[0]

    def image_features(self, images: np.ndarray) -> np.ndarray:
        return self.backbone.features(images)

    def forward_features(self, features, descriptors, mode: str = "eval", rng=None):
        """Forward pass from precomputed backbone features (the backbone is frozen)."""
        self._check_batch(features, descriptors)
        branches, cache = [], {}
        if self.uses_images:
            u, cache["head"] = self.head.forward(features, mode, rng)
            branches.append(u)
        if self.uses_descriptors:
            v, cache["desc"] = self.descriptor_branch.forward(descriptors, mode, rng)
            branches.append(v)
        if len(branches) > 1:
            z, cache["concat"] = self.concat.forward(branches, mode, rng)
        else:
            z = branches[0]
        out, cache["fusion"] = self.fusion.forward(z, mode, rng)
        return out, cache

    def forward(self, inputs, mode: str = "eval", rng=None):
        images, descriptors = inputs
        self._check_batch(images, descriptors)
        feats = self.image_features(images) if self.uses_images else None
        return self.forward_features(feats, descriptors, mode, rng)

    def backward(self, cache, grad_out: np.ndarray) -> None:
        g = self.fusion.backward(cache["fusion"], grad_out)
        if "concat" in cache:
            g_u, g_v = self.concat.backward(cache["concat"], g)
        elif self.uses_images:
            g_u, g_v = g, None
        else:
            g_u, g_v = None, g
        if g_u is not None:
            self.head.backward(cache["head"], g_u)  # stops at the frozen backbone
        if g_v is not None:
            self.descriptor_branch.backward(cache["desc"], g_v)

    def predict(self, images, descriptors, mode: str = "eval", rng=None) -> np.ndarray:
        return self.forward((images, descriptors), mode, rng)[0]

    # -- persistence -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "model",
            "model_kind": self.kind,
            "n_output": self.n_output,
            "d_descriptor": self.d_descriptor,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
            "backbone_spec": self.backbone.spec.to_dict() if self.backbone else None,
            "frozen": bool(self.backbone and self.backbone.frozen),
        }
        groups = self.param_groups()
        formats.write_checkpoint(path, meta, [(g, [p.arrays() for p in groups[g]]) for g in GROUPS])

    @classmethod
    def load(cls, path: str | Path) -> "DMTLRModel":
        meta, sections = formats.read_checkpoint(path)
        if meta.get("kind") != "model":
            raise formats.FormatError(f"{path}: not a model checkpoint")
        kind = meta["model_kind"]
        backbone = None
        if meta["backbone_spec"] is not None:
            backbone = freeze(build_backbone(BackboneSpec.from_dict(meta["backbone_spec"]), 0))
            load_params(backbone.conv_params, sections.get("w_f", []), "w_f")
        if kind == "dmtlr":
            model = build_dmtlr(backbone, meta["d_descriptor"], meta["n_output"], meta["seed"], meta["dropout_rate"])
        elif kind == "image_only":
            model = build_image_only(backbone, meta["n_output"], meta["seed"], meta["dropout_rate"])
        else:
            model = build_stats_only(meta["d_descriptor"], meta["n_output"], meta["seed"])
        groups = model.param_groups()
        for g in ("w_FT", "w_MLP", "w_r"):
            load_params(groups[g], sections.get(g, []), g)
        return model


def _require_frozen(backbone: Backbone | None) -> None:
    if backbone is None:
        raise ValueError("an image-bearing model needs a backbone")
    if not backbone.frozen or any(p.trainable for p in backbone.conv_params):
        raise ValueError("backbone must be frozen before model assembly")


def _fusion(in_dim: int, n_output: int, rng, dropout_rate: float) -> Sequential:
    return _dense_stack((in_dim, *FUSION_DIMS, n_output), rng, "fusion", dropout=dropout_rate, final_linear=True)


def _check_dims(d_descriptor: int | None, n_output: int) -> None:
    if d_descriptor is not None and d_descriptor < 1:
        raise ValueError(f"d_descriptor must be >= 1, got {d_descriptor}")
    if n_output < 1:
        raise ValueError(f"n_output must be >= 1, got {n_output}")


def build_dmtlr(backbone: Backbone, d_descriptor: int, n_output: int, seed: int = 0,
                dropout_rate: float = 0.5) -> DMTLRModel:
    _require_frozen(backbone)
    _check_dims(d_descriptor, n_output)
    head = build_head(backbone.spec, seed)
    desc = _dense_stack((d_descriptor, *DESCRIPTOR_DIMS), _rng(seed, 0x3A), "mlp")
    fusion = _fusion(backbone.spec.u_dim + DESCRIPTOR_DIMS[-1], n_output, _rng(seed, 0x4B), dropout_rate)
    return DMTLRModel("dmtlr", n_output, d_descriptor, backbone, head, desc, fusion, dropout_rate, seed)


def build_image_only(backbone: Backbone, n_output: int, seed: int = 0, dropout_rate: float = 0.5) -> DMTLRModel:
    _require_frozen(backbone)
    _check_dims(None, n_output)
    head = build_head(backbone.spec, seed)
    fusion = _fusion(backbone.spec.u_dim, n_output, _rng(seed, 0x4B), dropout_rate)
    return DMTLRModel("image_only", n_output, 0, backbone, head, None, fusion, dropout_rate, seed)


def build_stats_only(d_descriptor: int, n_output: int, seed: int = 0) -> DMTLRModel:
    _check_dims(d_descriptor, n_output)
    desc = _dense_stack((d_descriptor, *STATS_ONLY_DIMS), _rng(seed, 0x3A), "mlp")
    out = Sequential([Dense(STATS_ONLY_DIMS[-1], n_output, "linear", rng=_rng(seed, 0x4B), name="output")])
    return DMTLRModel("stats_only", n_output, d_descriptor, None, None, desc, out, 0.0, seed)


def build_model(kind: str, backbone: Backbone | None, d_descriptor: int, n_output: int, seed: int = 0) -> DMTLRModel:
    if kind == "dmtlr":
        return build_dmtlr(backbone, d_descriptor, n_output, seed)
    if kind == "image_only":
        return build_image_only(backbone, n_output, seed)
    if kind == "stats_only":
        return build_stats_only(d_descriptor, n_output, seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


# ---------------------------------------------------------------------------
# training

LR_RANGE = (1e-4, 1e-3)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    lr_decay: float = 0.95
    seed: int = 0
    n_output: int = 6
    allow_lr_override: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.allow_lr_override and not (LR_RANGE[0] <= self.lr <= LR_RANGE[1]):
            raise ValueError(f"lr {self.lr} outside [{LR_RANGE[0]}, {LR_RANGE[1]}]; set allow_lr_override to force it")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class TrainReport:
    train_loss: list[float]
    test_loss: list[float]
    wall_time: float
    final_train_eval_loss: float
    model: DMTLRModel = field(repr=False)


def _features(model: DMTLRModel, data: PreparedDataset) -> np.ndarray | None:
    if not model.uses_images:
        return None
    key = model.backbone.fingerprint()
    feats = data.feature_cache.get(key)
    if feats is None:
        feats = model.image_features(data.images)
        data.feature_cache[key] = feats
    return feats


def _eval_loss(model: DMTLRModel, feats, data: PreparedDataset, chunk: int = 256) -> float:
    pred = predict_dataset(model, data, feats, chunk)
    return mse_loss(pred, data.targets)[0]


def predict_dataset(model: DMTLRModel, data: PreparedDataset, feats: np.ndarray | None = None,
                    chunk: int = 256) -> np.ndarray:
    """Eval-mode predictions for every row of ``data`` (scaled units)."""
    if feats is None:
        feats = _features(model, data)
    out = np.empty((len(data), model.n_output))
    for s in range(0, len(data), chunk):
        f = feats[s : s + chunk] if feats is not None else None
        d = data.descriptors[s : s + chunk] if model.uses_descriptors else None
        out[s : s + chunk] = model.forward_features(f, d, "eval")[0]
    return out


def train(model: DMTLRModel, train_set: PreparedDataset, test_set: PreparedDataset | None,
          config: TrainConfig, log=None) -> TrainReport:
    """Joint Adam training of every trainable group against a single MSE loss.

    The frozen backbone is evaluated once per dataset and its activations
    cached, which is exact because those weights never change.
    """
    if len(train_set) < config.batch_size:
        raise ValueError(f"train set has {len(train_set)} rows, fewer than one batch of {config.batch_size}")
    if train_set.targets.shape[1] != model.n_output:
        raise ShapeError(f"targets have {train_set.targets.shape[1]} columns, model outputs {model.n_output}")
    started = time.perf_counter()
    f_train = _features(model, train_set)
    f_test = _features(model, test_set) if test_set is not None else None
    params = model.trainable_params()
    states = [AdamState.for_params(p, lr=config.lr) for p in params]
    rng = _rng(config.seed, 0xD0)
    desc = train_set.descriptors if model.uses_descriptors else None
    train_losses: list[float] = []
    test_losses: list[float] = []
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay**epoch
        for s in states:
            s.lr = lr
        total = 0.0
        for idx in batches(len(train_set), config.batch_size, config.seed, epoch):
            zero_grads(params)
            out, cache = model.forward_features(
                f_train[idx] if f_train is not None else None,
                desc[idx] if desc is not None else None, "train", rng)
            loss, g = mse_loss(out, train_set.targets[idx])
            model.backward(cache, g)
            for p, s in zip(params, states):
                adam_step(p, s)
            total += loss * len(idx)
        train_losses.append(total / len(train_set))
        test_losses.append(_eval_loss(model, f_test, test_set) if test_set is not None else float("nan"))
        if log is not None:
            log(f"{model.kind} epoch {epoch + 1}/{config.epochs}: train {train_losses[-1]:.4f} "
                f"test {test_losses[-1]:.4f}")
    return TrainReport(
        train_loss=train_losses,
        test_loss=test_losses,
        wall_time=time.perf_counter() - started,
        final_train_eval_loss=_eval_loss(model, f_train, train_set),
        model=model,
    )
