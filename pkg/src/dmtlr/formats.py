"""On-disk formats: DMIM raw images and DMTLR1 parameter checkpoints.

DMIM layout: ``b"DMIM"``, then u32 height, u32 width, u32 channels (little
endian), then height*width*channels little-endian float32 values, row-major
(H, W, C).

DMTLR1 layout: ``b"DMTLR1"``, u32 format version, u32 header length, a UTF-8
JSON header, then every array listed in the header in order as little-endian
float64. The header carries the section tag, ParamSet index and shapes of
each array, so the payload order is stable and self-describing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

IMAGE_MAGIC = b"DMIM"
CHECKPOINT_MAGIC = b"DMTLR1"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def write_image(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise FormatError(f"{path}: image must be (H, W, C), got shape {image.shape}")
    h, w, c = image.shape
    payload = np.ascontiguousarray(image, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(IMAGE_MAGIC + struct.pack("<III", h, w, c) + payload)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_image(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read image {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != IMAGE_MAGIC:
        raise FormatError(f"{path}: not a DMIM image")
    h, w, c = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * h * w * c
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {h}x{w}x{c}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float64)


def write_checkpoint(path: str | Path, meta: dict[str, Any],
                     sections: list[tuple[str, list[tuple[np.ndarray, np.ndarray]]]]) -> None:
    """Write ``sections``: ordered (tag, [(weights, biases), ...]) groups."""
    index = []
    blobs = []
    for tag, pairs in sections:
        for k, (w, b) in enumerate(pairs):
            for role, arr in (("weights", w), ("biases", b)):
                index.append({"section": tag, "param": k, "role": role, "shape": list(arr.shape)})
                blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, list[tuple[np.ndarray, np.ndarray]]]]:
    raw = Path(path).read_bytes()
    if raw[:6] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a DMTLR1 checkpoint")
    version, hlen = struct.unpack("<II", raw[6:14])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[14 : 14 + hlen].decode("utf-8"))
    offset = 14 + hlen
    grouped: dict[str, dict[int, dict[str, np.ndarray]]] = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
        grouped.setdefault(entry["section"], {}).setdefault(entry["param"], {})[entry["role"]] = arr
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    sections = {
        tag: [(params[k]["weights"], params[k]["biases"]) for k in sorted(params)]
        for tag, params in grouped.items()
    }
    return header["meta"], sections
