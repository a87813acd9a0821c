"""Convolutional backbone: build, pretrain on a source task, freeze, featurize."""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import formats
from .datagen import regime_ranges
from .nn import (AdamState, Conv2D, Dense, Layer, MaxPool2D, ParamSet, Sequential,
                 ShapeError, adam_step, softmax_cross_entropy, zero_grads)
from .pipeline import batches, channel_means, remove_channel_means, split


@dataclass(frozen=True)
class BackboneSpec:
    input_size: tuple[int, int, int] = (64, 64, 3)
    blocks: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    ft_head_dims: tuple[int, ...] = (256, 128)
    # fixed input rescale applied before the first convolution
    pixel_scale: float = 1.0 / 255.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "blocks", tuple((int(a), int(b)) for a, b in self.blocks))
        object.__setattr__(self, "ft_head_dims", tuple(int(v) for v in self.ft_head_dims))
        self.validate()

    def validate(self) -> None:
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ValueError(f"BackboneSpec.input_size must be three positive ints, got {self.input_size}")
        if not self.blocks:
            raise ValueError("BackboneSpec.blocks is empty: a backbone needs at least one block")
        for i, (ch, count) in enumerate(self.blocks):
            if ch < 1 or count < 1:
                raise ValueError(f"BackboneSpec.blocks[{i}] = {(ch, count)} must be positive")
        factor = 2 ** len(self.blocks)
        h, w, _ = self.input_size
        if h % factor or w % factor:
            raise ValueError(f"BackboneSpec.input_size {h}x{w} not divisible by 2^{len(self.blocks)}")
        if not self.ft_head_dims or min(self.ft_head_dims) < 1:
            raise ValueError(f"BackboneSpec.ft_head_dims must be non-empty and positive, got {self.ft_head_dims}")
        if not self.pixel_scale > 0:
            raise ValueError("BackboneSpec.pixel_scale must be positive")

    @property
    def feature_dim(self) -> int:
        h, w, _ = self.input_size
        factor = 2 ** len(self.blocks)
        return self.blocks[-1][0] * (h // factor) * (w // factor)

    @property
    def u_dim(self) -> int:
        return self.ft_head_dims[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(input_size=tuple(d["input_size"]), blocks=tuple(map(tuple, d["blocks"])),
                   ft_head_dims=tuple(d["ft_head_dims"]), pixel_scale=float(d["pixel_scale"]))


class Backbone:
    """Convolutional featurizer; its ParamSets are the featurization weights."""

    def __init__(self, spec: BackboneSpec, layers: list[Layer]):
        self.spec = spec
        self.net = Sequential(layers)
        self.frozen = False
        self.source_task_report: dict = {}

    @property
    def conv_params(self) -> list[ParamSet]:
        return self.net.param_sets()

    def param_sets(self) -> list[ParamSet]:
        return self.conv_params

    def _check_images(self, images: np.ndarray) -> None:
        if images.ndim != 4 or tuple(images.shape[1:]) != self.spec.input_size:
            raise ShapeError(f"backbone expects images (batch, {', '.join(map(str, self.spec.input_size))}), "
                             f"got {tuple(images.shape)}")

    def forward(self, images: np.ndarray, mode: str = "eval", rng=None):
        self._check_images(images)
        out, caches = self.net.forward(images * self.spec.pixel_scale, mode, rng)
        return out.reshape(out.shape[0], -1), (caches, out.shape)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        caches, shape = cache
        return self.net.backward(caches, grad_out.reshape(shape)) * self.spec.pixel_scale

    def features(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Flattened eval-mode activations of the last pooling layer."""
        self._check_images(images)
        out = np.empty((images.shape[0], self.spec.feature_dim))
        for start in range(0, images.shape[0], batch_size):
            out[start : start + batch_size] = self.forward(images[start : start + batch_size])[0]
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.conv_params:
            h.update(p.weights.tobytes())
            h.update(p.biases.tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        meta = {"kind": "backbone", "spec": self.spec.to_dict(), "frozen": self.frozen,
                "report": self.source_task_report}
        formats.write_checkpoint(path, meta, [("w_f", [p.arrays() for p in self.conv_params])])

    @classmethod
    def load(cls, path: str | Path) -> "Backbone":
        meta, sections = formats.read_checkpoint(path)
        if meta.get("kind") != "backbone":
            raise formats.FormatError(f"{path}: not a backbone checkpoint")
        bb = build_backbone(BackboneSpec.from_dict(meta["spec"]), seed=0)
        load_params(bb.conv_params, sections.get("w_f", []), "w_f")
        bb.source_task_report = meta.get("report", {})
        if meta.get("frozen"):
            freeze(bb)
        return bb


def load_params(targets: Sequence[ParamSet], arrays: Sequence[tuple[np.ndarray, np.ndarray]], tag: str) -> None:
    if len(targets) != len(arrays):
        raise formats.FormatError(f"section {tag}: expected {len(targets)} ParamSets, found {len(arrays)}")
    for p, (w, b) in zip(targets, arrays):
        if w.shape != p.weights.shape or b.shape != p.biases.shape:
            raise formats.FormatError(f"section {tag}: shape {w.shape} does not match {p.weights.shape}")
        p.weights[...] = w
        p.biases[...] = b


def build_backbone(spec: BackboneSpec | None = None, seed: int = 0) -> Backbone:
    spec = spec or BackboneSpec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBB]))
    layers: list[Layer] = []
    in_ch = spec.input_size[2]
    for b, (ch, count) in enumerate(spec.blocks):
        for k in range(count):
            layers.append(Conv2D(in_ch, ch, 3, 1, "same", "relu", rng=rng, name=f"block{b + 1}_conv{k + 1}"))
            in_ch = ch
        layers.append(MaxPool2D(2, 2, name=f"block{b + 1}_pool"))
    return Backbone(spec, layers)


def freeze(backbone: Backbone) -> Backbone:
    for p in backbone.conv_params:
        p.trainable = False
    backbone.frozen = True
    return backbone


def build_head(spec: BackboneSpec, seed: int) -> Sequential:
    """Fine-tune head: ReLU dense layers on top of the flattened backbone output."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF7]))
    dims = (spec.feature_dim, *spec.ft_head_dims)
    return Sequential(Dense(a, b, "relu", rng=rng, name=f"ft_dense{i + 1}")
                      for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])))


def featurize(backbone: Backbone, head: Sequential, images: np.ndarray, mode: str = "eval",
              rng: np.random.Generator | None = None) -> np.ndarray:
    if not backbone.frozen:
        raise ValueError("featurize requires a frozen backbone")
    return head.forward(backbone.features(images), mode, rng)[0]


# ---------------------------------------------------------------------------
# source-domain pretraining

N_SOURCE_CLASSES = 4


def quench_time_labels(total_times: np.ndarray, regime: str = "source",
                       n_classes: int = N_SOURCE_CLASSES) -> np.ndarray:
    """Equal-width bins of the total quench time over the regime's range."""
    lo, hi = regime_ranges(regime)["total_time"]
    edges = np.linspace(lo, hi, n_classes + 1)[1:-1]
    return np.searchsorted(edges, np.asarray(total_times), side="right").astype(np.int64)


def _pretext_head(spec: BackboneSpec, seed: int) -> Sequential:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E]))
    return Sequential([Dense(spec.feature_dim, 128, "relu", rng=rng, name="pretext_dense"),
                       Dense(128, N_SOURCE_CLASSES, "linear", rng=rng, name="pretext_logits")])


def _evaluate(backbone: Backbone, head: Sequential, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    logits = head.forward(backbone.features(images))[0]
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss, float((logits.argmax(axis=1) == labels).mean())


def pretrain_backbone(backbone: Backbone, images: np.ndarray, labels: np.ndarray, epochs: int = 5,
                      lr: float = 1e-3, seed: int = 0, batch_size: int = 32,
                      log=None) -> Backbone:
    """Train the backbone plus a throwaway classifier head on the source task.

    ``images`` are rendered source images in pixel units; channel means are
    taken from the training part of an internal 2/3 : 1/3 split and the held-out
    third measures the source task. Only the convolutional weights are kept.
    """
    if len(images) == 0:
        raise ValueError("pretrain_backbone: empty source dataset")
    if len(images) != len(labels):
        raise ValueError("pretrain_backbone: images and labels differ in length")
    if backbone.frozen:
        raise ValueError("pretrain_backbone: backbone is already frozen")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    labels = np.asarray(labels, dtype=np.int64)
    plan = split(len(images), seed)
    means = channel_means(images[plan.train])
    x_tr = remove_channel_means(images[plan.train], means)
    y_tr = labels[plan.train]
    x_ho = remove_channel_means(images[plan.test], means)
    y_ho = labels[plan.test]

    head = _pretext_head(backbone.spec, seed)
    params = backbone.conv_params + head.param_sets()
    states = [AdamState.for_params(p, lr=lr) for p in params]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A]))
    init_loss, init_acc = _evaluate(backbone, head, x_ho, y_ho)
    started = time.perf_counter()
    train_losses = []
    for epoch in range(epochs):
        total = 0.0
        for idx in batches(len(x_tr), batch_size, seed, epoch):
            zero_grads(params)
            feats, cache = backbone.forward(x_tr[idx], "train", rng)
            logits, hcache = head.forward(feats, "train", rng)
            loss, g = softmax_cross_entropy(logits, y_tr[idx])
            backbone.backward(cache, head.backward(hcache, g))
            for p, s in zip(params, states):
                adam_step(p, s)
            total += loss * len(idx)
        train_losses.append(total / len(x_tr))
        if log is not None:
            log(f"pretrain epoch {epoch + 1}/{epochs}: train loss {train_losses[-1]:.4f}")
    final_loss, final_acc = _evaluate(backbone, head, x_ho, y_ho)
    backbone.source_task_report = {
        "epochs": epochs,
        "lr": lr,
        "n_train": int(len(x_tr)),
        "n_holdout": int(len(x_ho)),
        "chance_accuracy": 1.0 / N_SOURCE_CLASSES,
        "initial_holdout_loss": init_loss,
        "initial_holdout_accuracy": init_acc,
        "final_holdout_loss": final_loss,
        "final_holdout_accuracy": final_acc,
        "train_loss": train_losses,
        "wall_time_s": time.perf_counter() - started,
    }
    return backbone
