"""Synthetic spinodal-decomposition data.

Each sample is a Cahn-Hilliard run on a periodic N x N grid (unit spacing)

    dc/dt = M(t) lap(mu),   mu = A (c^3 - c) - (kx d2/dx2 + ky d2/dy2) c

stepped with a semi-implicit Fourier spectral scheme. The 18 descriptors are
the run's input parameters, the 6 targets are read off the final field.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft

from . import fft as rfft
from .formats import write_image

MANIFEST_VERSION = "dmtlr-synthetic-ch/1"

PARAM_NAMES = (
    "c0",
    "mobility",
    "kappa",
    "well_height",
    "noise_amplitude",
    "total_time",
    "dt",
    "quench_ramp_linear",
    "quench_ramp_quadratic",
    "anisotropy_x",
    "anisotropy_y",
    "texture_phase",
    "nuisance_1",
    "nuisance_2",
    "nuisance_3",
    "nuisance_4",
    "nuisance_5",
    "nuisance_6",
)

TARGET_NAMES = (
    "min_composition",
    "max_composition",
    "mean_abs_chemical_potential",
    "gradient_energy_density",
    "positive_phase_area_fraction",
    "characteristic_length",
)

PARAM_COLUMNS = tuple(f"p{i:02d}" for i in range(1, 19))
TARGET_COLUMNS = tuple(f"t{i}" for i in range(1, 7))
MANIFEST_COLUMNS = ("sample_id", "image_file", *PARAM_COLUMNS, *TARGET_COLUMNS)

FULL_RANGES: dict[str, tuple[float, float]] = {
    "c0": (-0.4, 0.4),
    "mobility": (0.5, 2.0),
    "kappa": (0.5, 3.0),
    "well_height": (0.5, 2.0),
    "noise_amplitude": (0.005, 0.05),
    "total_time": (20.0, 80.0),
    "dt": (0.05, 0.1),
    "quench_ramp_linear": (-0.3, 0.3),
    "quench_ramp_quadratic": (-0.3, 0.3),
    "anisotropy_x": (0.8, 1.2),
    "anisotropy_y": (0.8, 1.2),
    "texture_phase": (0.0, 2.0 * math.pi),
    **{f"nuisance_{i}": (0.0, 1.0) for i in range(1, 7)},
}


# Validation accepts a zero noise amplitude (the noise-free fixed point);
# sampling never produces it.
VALID_RANGES = {**FULL_RANGES, "noise_amplitude": (0.0, FULL_RANGES["noise_amplitude"][1])}


def _split_third(lo: float, hi: float) -> float:
    return lo + 2.0 * (hi - lo) / 3.0


def regime_ranges(regime: str) -> dict[str, tuple[float, float]]:
    """Per-field sampling ranges. The source regime owns the upper third of
    mobility and kappa, the target regime the lower two thirds."""
    if regime not in ("target", "source"):
        raise ValueError(f"regime must be 'target' or 'source', got {regime!r}")
    ranges = dict(FULL_RANGES)
    for name in ("mobility", "kappa"):
        lo, hi = FULL_RANGES[name]
        cut = _split_third(lo, hi)
        ranges[name] = (cut, hi) if regime == "source" else (lo, cut)
    return ranges


@dataclass(frozen=True)
class SimParams:
    c0: float
    mobility: float
    kappa: float
    well_height: float
    noise_amplitude: float
    total_time: float
    dt: float
    quench_ramp_linear: float
    quench_ramp_quadratic: float
    anisotropy_x: float
    anisotropy_y: float
    texture_phase: float
    nuisance_1: float = 0.5
    nuisance_2: float = 0.5
    nuisance_3: float = 0.5
    nuisance_4: float = 0.5
    nuisance_5: float = 0.5
    nuisance_6: float = 0.5

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            v = getattr(self, name)
            lo, hi = VALID_RANGES[name]
            if not (math.isfinite(v) and lo <= v <= hi):
                raise ValueError(f"SimParams.{name}={v} outside [{lo}, {hi}]")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_vector(cls, values: Sequence[float]) -> "SimParams":
        if len(values) != len(PARAM_NAMES):
            raise ValueError(f"expected {len(PARAM_NAMES)} parameters, got {len(values)}")
        return cls(**{n: float(v) for n, v in zip(PARAM_NAMES, values)})

    @classmethod
    def midrange(cls, **overrides: float) -> "SimParams":
        mid = {n: 0.5 * (lo + hi) for n, (lo, hi) in FULL_RANGES.items()}
        mid.update(c0=0.0, quench_ramp_linear=0.0, quench_ramp_quadratic=0.0,
                   anisotropy_x=1.0, anisotropy_y=1.0)
        mid.update(overrides)
        return cls(**mid)

    @property
    def n_steps(self) -> int:
        return math.ceil(self.total_time / self.dt)

    def mobility_at(self, t: float) -> float:
        s = t / self.total_time
        return self.mobility * (1.0 + self.quench_ramp_linear * s + self.quench_ramp_quadratic * s * s)


def sample_params(rng: np.random.Generator, regime: str = "target") -> SimParams:
    ranges = regime_ranges(regime)
    return SimParams(**{n: float(rng.uniform(*ranges[n])) for n in PARAM_NAMES})


class SimulationError(RuntimeError):
    def __init__(self, step: int, sample: int = 0):
        super().__init__(f"non-finite field at step {step} (batch member {sample})")
        self.step = step
        self.sample = sample


@dataclass
class PhaseField:
    grid: np.ndarray
    params: SimParams
    steps: int
    energy_steps: list[int] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.grid.shape[0]


def _radix2_rfft2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    return rfft.fft2(x)[..., : n // 2 + 1]


def _radix2_irfft2(h: np.ndarray) -> np.ndarray:
    n = h.shape[-2]
    # rebuild the conjugate-symmetric right half of the spectrum
    rows = (-np.arange(n)) % n
    cols = np.arange(n // 2 - 1, 0, -1)
    right = np.conj(h[..., rows, :][..., cols])
    return np.real(rfft.ifft2(np.concatenate((h, right), axis=-1)))


# Real-to-complex transforms over the last two axes, half spectrum on axis -1.
_BACKENDS: dict[str, tuple[Callable, Callable]] = {
    "scipy": (scipy.fft.rfft2, lambda h: scipy.fft.irfft2(h, s=(h.shape[-2], h.shape[-2]))),
    "radix2": (_radix2_rfft2, _radix2_irfft2),
}


def _spectral_ops(n: int, half: bool = False):
    """Squared wavenumbers (kx^2, ky^2); ``half`` gives the rfft layout."""
    k = rfft.wavenumbers(n)
    kx = np.abs(k[: n // 2 + 1]) if half else k  # Nyquist sign is irrelevant once squared
    shape = (n, kx.size)
    return np.broadcast_to(kx[None, :] ** 2, shape), np.broadcast_to(k[:, None] ** 2, shape)


def _half_weights(n: int) -> np.ndarray:
    w = np.full(n // 2 + 1, 2.0)
    w[0] = w[-1] = 1.0
    return w


def initial_condition(params: SimParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean perturbation of the uniform state, returned without the c0 offset.

    The perturbation is uniform noise plus a weak cosine seed whose phase is
    the texture-phase parameter; its exact mean is removed so the composition
    mean is c0.
    """
    if params.noise_amplitude == 0.0:
        return np.zeros((n, n))
    u = rng.uniform(-1.0, 1.0, size=(n, n))
    x = np.arange(n)
    seed_mode = 0.5 * np.cos(2.0 * np.pi * 4.0 * (x[None, :] + x[:, None]) / n + params.texture_phase)
    pert = params.noise_amplitude * (u + seed_mode)
    return pert - pert.mean()


def free_energy_spectral(c: np.ndarray, c_hat: np.ndarray, A, kx, ky, kx2, ky2,
                         weights: np.ndarray | float = 1.0) -> np.ndarray:
    """Sum over the grid of A (c^2-1)^2 / 4 + (kx |dc/dx|^2 + ky |dc/dy|^2) / 2.

    The gradient part uses Parseval on the spectral derivative; ``weights``
    double-counts interior columns when ``c_hat`` is a half spectrum. Works on
    a leading batch axis.
    """
    n2 = c.shape[-1] * c.shape[-2]
    bulk = (A * (c * c - 1.0) ** 2 / 4.0).sum(axis=(-2, -1))
    grad = (weights * (kx * kx2 + ky * ky2) * np.abs(c_hat) ** 2).sum(axis=(-2, -1)) / (2.0 * n2)
    return bulk + grad


def free_energy(field_: PhaseField | np.ndarray, params: SimParams | None = None) -> float:
    if isinstance(field_, PhaseField):
        params = field_.params
        c = field_.grid
    else:
        c = np.asarray(field_, dtype=np.float64)
    assert params is not None
    kx2, ky2 = _spectral_ops(c.shape[0])
    kx, ky = params.kappa * params.anisotropy_x, params.kappa * params.anisotropy_y
    return float(free_energy_spectral(c, rfft.fft2(c), params.well_height, kx, ky, kx2, ky2))


def run_simulations(params_list: Sequence[SimParams], n: int = 64,
                    rngs: Sequence[np.random.Generator] | None = None, *,
                    record_every: int = 50, stabilization: float = 1.0,
                    backend: str = "scipy") -> list[PhaseField]:
    """Integrate a batch of independent runs side by side.

    ``stabilization`` is the linear splitting constant in units of the well
    height (S = stabilization * A); 0 gives the plain semi-implicit update.
    Runs with fewer steps are held fixed once they finish.
    """
    if not rfft.is_power_of_two(n) or n < 2:
        raise ValueError(f"grid size must be a power of two, got {n}")
    if backend not in _BACKENDS:
        raise ValueError(f"unknown FFT backend {backend!r}")
    if stabilization < 0:
        raise ValueError("stabilization must be non-negative")
    b = len(params_list)
    if b == 0:
        return []
    if rngs is None:
        rngs = [np.random.default_rng(0) for _ in range(b)]
    fwd, inv = _BACKENDS[backend]

    def col(name):
        return np.array([getattr(p, name) for p in params_list], dtype=np.float64)[:, None, None]

    A = col("well_height")
    kx, ky = col("kappa") * col("anisotropy_x"), col("kappa") * col("anisotropy_y")
    dt, T = col("dt"), col("total_time")
    m0, q1, q2 = col("mobility"), col("quench_ramp_linear"), col("quench_ramp_quadratic")
    S = stabilization * A
    kx2, ky2 = _spectral_ops(n, half=True)
    weights = _half_weights(n)
    k2 = kx2 + ky2
    lin4 = (kx * kx2 + ky * ky2) * k2
    n_steps = np.array([p.n_steps for p in params_list])

    pert = np.stack([initial_condition(p, n, r) for p, r in zip(params_list, rngs)])
    c_hat = fwd(pert)
    c_hat[:, 0, 0] = col("c0")[:, 0, 0] * (n * n)
    c = inv(c_hat)

    energy_steps: list[list[int]] = [[] for _ in range(b)]
    energies: list[list[float]] = [[] for _ in range(b)]

    def record(step: int, which: np.ndarray) -> None:
        if record_every <= 0 or not which.any():
            return
        e = free_energy_spectral(c, c_hat, A, kx, ky, kx2, ky2, weights)
        for i in np.flatnonzero(which):
            energy_steps[i].append(step)
            energies[i].append(float(e[i]))

    record(0, np.ones(b, dtype=bool))
    stiff = S * k2 + lin4
    well = A * (1.0 + stabilization)
    dtm = np.empty((b, 1, 1))
    buf = np.empty_like(c_hat)
    denom = np.empty(c_hat.shape)
    for step in range(int(n_steps.max())):
        active = step < n_steps
        s_frac = step * dt / T
        np.multiply(m0 * (1.0 + q1 * s_frac + q2 * s_frac * s_frac), dt, out=dtm)
        dtm[~active] = 0.0  # finished runs take an exact identity step
        # f(c) - S c = c (A c^2 - (A + S))
        nl = c * c
        nl *= A
        nl -= well
        nl *= c
        np.multiply(fwd(nl), k2, out=buf)
        buf *= dtm
        c_hat -= buf
        np.multiply(stiff, dtm, out=denom)
        denom += 1.0
        c_hat /= denom
        c = inv(c_hat)
        finite = np.isfinite(c).all(axis=(1, 2))
        if not finite.all():
            raise SimulationError(step + 1, int(np.flatnonzero(~finite)[0]))
        done = step + 1
        rec = (done % record_every == 0) if record_every > 0 else False
        record(done, active & ((done == n_steps) | rec))

    return [
        PhaseField(grid=c[i].copy(), params=p, steps=int(n_steps[i]),
                   energy_steps=energy_steps[i], energies=energies[i])
        for i, p in enumerate(params_list)
    ]


def run_simulation(params: SimParams, n: int = 64, rng: np.random.Generator | None = None,
                   **kwargs) -> PhaseField:
    return run_simulations([params], n, [rng if rng is not None else np.random.default_rng(0)], **kwargs)[0]


@dataclass(frozen=True)
class TargetVector:
    min_composition: float
    max_composition: float
    mean_abs_chemical_potential: float
    gradient_energy_density: float
    positive_phase_area_fraction: float
    characteristic_length: float
    length_flagged: bool = False

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in TARGET_NAMES], dtype=np.float64)


def extract_targets(field_: PhaseField | np.ndarray, params: SimParams | None = None) -> TargetVector:
    if isinstance(field_, PhaseField):
        params = params or field_.params
        c = field_.grid
    else:
        c = np.asarray(field_, dtype=np.float64)
    if params is None:
        raise ValueError("extract_targets needs SimParams for a bare grid")
    if not np.isfinite(c).all():
        raise ValueError("extract_targets: field contains non-finite values")
    n = c.shape[0]
    kx2, ky2 = _spectral_ops(n)
    kx, ky = params.kappa * params.anisotropy_x, params.kappa * params.anisotropy_y
    c_hat = rfft.fft2(c)
    aniso = kx * kx2 + ky * ky2
    mu = params.well_height * (c**3 - c) + np.real(rfft.ifft2(aniso * c_hat))
    power = np.abs(c_hat) ** 2
    grad_energy = float((aniso * power).sum() / (2.0 * n**4))

    kmag = np.sqrt(kx2 + ky2)
    power[0, 0] = 0.0
    total = power.sum()
    flagged = not (total > 1e-24 * n**4)
    if flagged:
        length = float(n)
    else:
        length = float(2.0 * np.pi / ((kmag * power).sum() / total))
    return TargetVector(
        min_composition=float(c.min()),
        max_composition=float(c.max()),
        mean_abs_chemical_potential=float(np.abs(mu).mean()),
        gradient_energy_density=grad_energy,
        positive_phase_area_fraction=float((c > 0.0).mean()),
        characteristic_length=min(length, float(n)),
        length_flagged=flagged,
    )


def render_image(field_: PhaseField | np.ndarray) -> np.ndarray:
    """Map the composition range linearly onto [0, 255], replicated over 3 channels."""
    c = field_.grid if isinstance(field_, PhaseField) else np.asarray(field_, dtype=np.float64)
    lo, hi = float(c.min()), float(c.max())
    if hi > lo:
        gray = (c - lo) * (255.0 / (hi - lo))
    else:
        gray = np.full(c.shape, 127.5)
    return np.repeat(gray[:, :, None], 3, axis=2)


@dataclass
class ManifestRow:
    sample_id: int
    image_file: str
    descriptors: np.ndarray
    targets: np.ndarray


@dataclass
class DatasetManifest:
    path: Path
    rows: list[ManifestRow]
    meta: dict

    def __len__(self) -> int:
        return len(self.rows)


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, sample_id]))


def _fmt(v: float) -> str:
    return repr(float(v))


def generate_dataset(count: int, regime: str = "target", n: int = 64, seed: int = 0,
                     output_dir: str | Path = "data", *, chunk: int = 32,
                     progress: Callable[[int, int], None] | None = None) -> DatasetManifest:
    """Simulate ``count`` samples, write DMIM images and ``manifest.csv``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    regime_ranges(regime)
    out = Path(output_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    rngs = [sample_rng(seed, i) for i in range(count)]
    params = [sample_params(r, regime) for r in rngs]
    # Runs are independent, so grouping similar step counts changes no bits.
    order = sorted(range(count), key=lambda i: (params[i].n_steps, i))
    results: dict[int, ManifestRow] = {}
    flagged: list[int] = []
    for start in range(0, count, chunk):
        ids = order[start : start + chunk]
        fields_ = run_simulations([params[i] for i in ids], n, [rngs[i] for i in ids], record_every=0)
        for i, f in zip(ids, fields_):
            tv = extract_targets(f)
            if tv.length_flagged:
                flagged.append(i)
            rel = f"images/img_{i:05d}.dmim"
            write_image(out / rel, render_image(f))
            results[i] = ManifestRow(i, rel, params[i].to_vector(), tv.to_vector())
        if progress is not None:
            progress(len(results), count)
    rows = [results[i] for i in range(count)]
    flagged.sort()

    path = out / "manifest.csv"
    meta = {
        "format": MANIFEST_VERSION,
        "regime": regime,
        "grid": n,
        "seed": seed,
        "count": count,
        "descriptor_columns": dict(zip(PARAM_COLUMNS, PARAM_NAMES)),
        "target_columns": dict(zip(TARGET_COLUMNS, TARGET_NAMES)),
        "ranges": {k: list(v) for k, v in regime_ranges(regime).items()},
        "length_scale_flagged": flagged,
        "image_format": "DMIM little-endian float32 (H, W, C)",
    }
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in rows:
                w.writerow([r.sample_id, r.image_file, *map(_fmt, r.descriptors), *map(_fmt, r.targets)])
        (out / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc
    return DatasetManifest(path, rows, meta)
