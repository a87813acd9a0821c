"""Tiny raster plotting: scatter and line panels, PNG and DMIM output.

No text rendering; panel order and colours are fixed and listed in the
report's metadata instead.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .formats import write_image

PALETTE = {
    "dmtlr": (200, 40, 40),
    "image_only": (40, 90, 200),
    "stats_only": (40, 150, 60),
    "axis": (0, 0, 0),
    "grid": (225, 225, 225),
    "identity": (150, 150, 150),
}


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    """Lossless 8-bit RGB PNG."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[y].tobytes() for y in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    png = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
           + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))
    Path(path).write_bytes(png)


class Panel:
    """Axis-aligned plotting area mapping data coordinates onto canvas pixels."""

    def __init__(self, canvas: "Canvas", x0: int, y0: int, w: int, h: int,
                 xlim: tuple[float, float], ylim: tuple[float, float]):
        self.canvas, self.x0, self.y0, self.w, self.h = canvas, x0, y0, w, h
        self.xlim = _padded(xlim)
        self.ylim = _padded(ylim)
        canvas.rect(x0, y0, w, h, PALETTE["axis"])

    def to_px(self, x, y):
        (xa, xb), (ya, yb) = self.xlim, self.ylim
        px = self.x0 + (np.asarray(x, float) - xa) / (xb - xa) * (self.w - 1)
        py = self.y0 + self.h - 1 - (np.asarray(y, float) - ya) / (yb - ya) * (self.h - 1)
        return px, py

    def scatter(self, x, y, color, size: int = 1) -> None:
        px, py = self.to_px(x, y)
        for a, b in zip(px, py):
            self.canvas.dot(int(round(a)), int(round(b)), color, size, clip=self)

    def line(self, x, y, color) -> None:
        px, py = self.to_px(x, y)
        for i in range(len(px) - 1):
            self.canvas.segment(px[i], py[i], px[i + 1], py[i + 1], color, clip=self)


def _padded(lim: tuple[float, float]) -> tuple[float, float]:
    a, b = float(lim[0]), float(lim[1])
    if not (np.isfinite(a) and np.isfinite(b)):
        return 0.0, 1.0
    if b <= a:
        a, b = a - 0.5, a + 0.5
    pad = 0.05 * (b - a)
    return a - pad, b + pad


class Canvas:
    def __init__(self, width: int, height: int):
        self.pixels = np.full((height, width, 3), 255, dtype=np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def _inside(self, x: int, y: int, clip: Panel | None) -> bool:
        h, w = self.shape
        if clip is not None:
            return clip.x0 < x < clip.x0 + clip.w - 1 and clip.y0 < y < clip.y0 + clip.h - 1
        return 0 <= x < w and 0 <= y < h

    def put(self, x: int, y: int, color, clip: Panel | None = None) -> None:
        if self._inside(x, y, clip):
            self.pixels[y, x] = color

    def dot(self, x: int, y: int, color, size: int = 1, clip: Panel | None = None) -> None:
        for dy in range(-size, size + 1):
            for dx in range(-size, size + 1):
                self.put(x + dx, y + dy, color, clip)

    def segment(self, xa, ya, xb, yb, color, clip: Panel | None = None) -> None:
        steps = int(max(abs(xb - xa), abs(yb - ya))) + 1
        for t in np.linspace(0.0, 1.0, steps + 1):
            self.put(int(round(xa + t * (xb - xa))), int(round(ya + t * (yb - ya))), color, clip)

    def rect(self, x0: int, y0: int, w: int, h: int, color) -> None:
        self.pixels[y0, x0 : x0 + w] = color
        self.pixels[y0 + h - 1, x0 : x0 + w] = color
        self.pixels[y0 : y0 + h, x0] = color
        self.pixels[y0 : y0 + h, x0 + w - 1] = color

    def save(self, stem: str | Path) -> list[Path]:
        stem = Path(stem)
        png, raw = stem.with_suffix(".png"), stem.with_suffix(".dmim")
        write_png(png, self.pixels)
        write_image(raw, self.pixels.astype(np.float32))
        return [png, raw]


def _grid(n: int) -> tuple[int, int]:
    cols = min(n, 3)
    return cols, -(-n // cols)


def scatter_grid(true: np.ndarray, pred: dict[str, np.ndarray], panel: int = 200, margin: int = 12) -> Canvas:
    """One panel per target column: predicted vs true, with the identity line."""
    n_targets = true.shape[1]
    cols, rows = _grid(n_targets)
    canvas = Canvas(cols * (panel + margin) + margin, rows * (panel + margin) + margin)
    for j in range(n_targets):
        r, c = divmod(j, cols)
        values = [true[:, j]] + [p[:, j] for p in pred.values()]
        lo = min(float(np.min(v)) for v in values)
        hi = max(float(np.max(v)) for v in values)
        ax = Panel(canvas, margin + c * (panel + margin), margin + r * (panel + margin), panel, panel, (lo, hi), (lo, hi))
        ax.line([lo, hi], [lo, hi], PALETTE["identity"])
        for kind, p in pred.items():
            ax.scatter(true[:, j], p[:, j], PALETTE.get(kind, (0, 0, 0)))
    return canvas


def loss_panels(curves: dict[str, tuple[Sequence[float], Sequence[float]]], width: int = 420,
                height: int = 260, margin: int = 12) -> Canvas:
    """Left panel train loss, right panel test loss, one colour per model kind."""
    canvas = Canvas(2 * (width + margin) + margin, height + 2 * margin)
    allv = [v for tr, te in curves.values() for v in (*tr, *te) if np.isfinite(v)]
    epochs = max((len(tr) for tr, _ in curves.values()), default=1)
    ylim = (0.0, max(allv) if allv else 1.0)
    for i in range(2):
        ax = Panel(canvas, margin + i * (width + margin), margin, width, height, (1, max(epochs, 2)), ylim)
        for kind, series in curves.items():
            y = np.asarray(series[i], dtype=float)
            ax.line(np.arange(1, len(y) + 1), y, PALETTE.get(kind, (0, 0, 0)))
            ax.scatter(np.arange(1, len(y) + 1), y, PALETTE.get(kind, (0, 0, 0)), size=1)
    return canvas
