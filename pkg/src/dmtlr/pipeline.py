"""Loading, preprocessing, splitting and batching.

All fitted statistics (channel means, scalers) come from the training split
only; the test split is transformed with them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .datagen import MANIFEST_COLUMNS, PARAM_COLUMNS, TARGET_COLUMNS
from .formats import read_image


class ManifestError(ValueError):
    pass


@dataclass
class RawDataset:
    sample_ids: np.ndarray
    image_files: list[Path]
    images: np.ndarray  # (n, H, W, C)
    descriptors: np.ndarray  # (n, 18)
    targets: np.ndarray  # (n, 6)

    def __len__(self) -> int:
        return len(self.sample_ids)


def load_dataset(manifest_path: str | Path) -> RawDataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    ids, files, imgs, desc, targ = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            n_desc = sum(1 for h in (header or []) if h.startswith("p"))
            raise ManifestError(
                f"{path}: header mismatch at row 1 (found {n_desc} descriptor columns, "
                f"expected {len(PARAM_COLUMNS)}; columns must be {', '.join(MANIFEST_COLUMNS)})"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}: row {lineno} has {len(row)} fields, expected {len(MANIFEST_COLUMNS)}")
            try:
                sid = int(row[0])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ManifestError(f"{path}: malformed value in row {lineno}: {exc}") from exc
            img_path = root / row[1]
            if not img_path.exists():
                raise FileNotFoundError(f"row {lineno}: missing image file {img_path}")
            ids.append(sid)
            files.append(img_path)
            imgs.append(read_image(img_path))
            desc.append(values[: len(PARAM_COLUMNS)])
            targ.append(values[len(PARAM_COLUMNS) :])
    if not ids:
        raise ManifestError(f"{path}: no sample rows")
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ManifestError(f"{path}: images have mixed shapes {sorted(shapes)}")
    return RawDataset(
        sample_ids=np.array(ids, dtype=np.int64),
        image_files=files,
        images=np.stack(imgs),
        descriptors=np.array(desc, dtype=np.float64),
        targets=np.array(targ, dtype=np.float64).reshape(len(ids), len(TARGET_COLUMNS)),
    )


def resize_images(images: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Area-average downsampling by an integer factor per axis."""
    n, h, w, c = images.shape
    th, tw = target_hw
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ValueError(f"cannot resize {h}x{w} to {th}x{tw}: sizes must divide by an integer factor")
    fh, fw = h // th, w // tw
    if fh == 1 and fw == 1:
        return images
    return images.reshape(n, th, fh, tw, fw, c).mean(axis=(2, 4))


def channel_means(images: np.ndarray) -> np.ndarray:
    return images.mean(axis=(0, 1, 2))


def remove_channel_means(images: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Subtract per-channel means. Not idempotent: a second call shifts again."""
    return images - np.asarray(means, dtype=np.float64)


class NotFittedError(RuntimeError):
    pass


class StandardScaler:
    """Column-wise standardisation with population standard deviation.

    Zero-variance columns keep a divisor of 1 and are listed in ``flagged``.
    """

    def __init__(self) -> None:
        self.mean: np.ndarray | None = None
        self.scale: np.ndarray | None = None
        self.flagged: np.ndarray = np.zeros(0, dtype=bool)

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, x: np.ndarray) -> "StandardScaler":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"StandardScaler.fit expects (n>=1, d), got {x.shape}")
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.flagged = ~(std > 0.0)
        self.scale = np.where(self.flagged, 1.0, std)
        return self

    def _check(self, x: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError("StandardScaler used before fit")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"expected {self.mean.shape[0]} columns, got {x.shape[-1]}")
        return x

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        return (x - self.mean) / self.scale

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        z = self._check(z)
        return z * self.scale + self.mean

    def fit_transform(self, x: np.ndarray) -> np.ndarray:
        return self.fit(x).transform(x)


@dataclass(frozen=True)
class SplitPlan:
    train: np.ndarray
    test: np.ndarray
    seed: int


def split(n: int, seed: int, train_fraction: float = 2.0 / 3.0) -> SplitPlan:
    """Random train/test split with ``round(n * 2/3)`` training rows."""
    if n < 3:
        raise ValueError(f"need at least 3 rows to split, got {n}")
    n_train = int(round(n * train_fraction))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B1])).permutation(n)
    return SplitPlan(train=np.sort(perm[:n_train]), test=np.sort(perm[n_train:]), seed=seed)


def batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffled index batches for one epoch; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xBA7])).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class PreparedDataset:
    images: np.ndarray  # (n, H, W, C), channel-mean removed
    descriptors: np.ndarray  # (n, d), scaled
    targets: np.ndarray  # (n, n_output), scaled
    sample_ids: np.ndarray
    split: str
    feature_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        n = len(self.sample_ids)
        if not (len(self.images) == len(self.descriptors) == len(self.targets) == n):
            raise ValueError("PreparedDataset tensors are not row-aligned")

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass
class Preprocessor:
    channel_means: np.ndarray
    descriptor_scaler: StandardScaler
    target_scaler: StandardScaler
    target_indices: tuple[int, ...]
    input_hw: tuple[int, int]

    def apply(self, raw: RawDataset, rows: np.ndarray, tag: str) -> PreparedDataset:
        imgs = resize_images(raw.images[rows], self.input_hw)
        return PreparedDataset(
            images=remove_channel_means(imgs, self.channel_means),
            descriptors=self.descriptor_scaler.transform(raw.descriptors[rows]),
            targets=self.target_scaler.transform(raw.targets[rows][:, list(self.target_indices)]),
            sample_ids=raw.sample_ids[rows],
            split=tag,
        )

    def targets_to_physical(self, scaled: np.ndarray) -> np.ndarray:
        return self.target_scaler.inverse_transform(scaled)


def fit_preprocessor(raw: RawDataset, train_rows: np.ndarray,
                     target_indices: Sequence[int] | None = None,
                     input_hw: tuple[int, int] | None = None) -> Preprocessor:
    """Fit channel means and both scalers on ``train_rows`` only."""
    idx = tuple(range(raw.targets.shape[1])) if target_indices is None else tuple(target_indices)
    hw = input_hw or raw.images.shape[1:3]
    imgs = resize_images(raw.images[train_rows], hw)
    return Preprocessor(
        channel_means=channel_means(imgs),
        descriptor_scaler=StandardScaler().fit(raw.descriptors[train_rows]),
        target_scaler=StandardScaler().fit(raw.targets[train_rows][:, list(idx)]),
        target_indices=idx,
        input_hw=(int(hw[0]), int(hw[1])),
    )


def prepare(raw: RawDataset, plan: SplitPlan, target_indices: Sequence[int] | None = None,
            input_hw: tuple[int, int] | None = None) -> tuple[PreparedDataset, PreparedDataset, Preprocessor]:
    pre = fit_preprocessor(raw, plan.train, target_indices, input_hw)
    return pre.apply(raw, plan.train, "train"), pre.apply(raw, plan.test, "test"), pre
