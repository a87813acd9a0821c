"""Iterative radix-2 Cooley-Tukey FFT, vectorised over leading axes."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int, sign: float) -> np.ndarray:
    return np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """1-D DFT along the last axis; ``inverse`` includes the 1/n factor."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    lead = x.shape[:-1]
    y = x.astype(np.complex128)[..., _bit_reversal(n)]
    sign = 1.0 if inverse else -1.0
    m = 2
    while m <= n:
        half = m // 2
        y = y.reshape(lead + (n // m, m))
        even = y[..., :half]
        odd = y[..., half:] * _twiddles(m, sign)
        y = np.concatenate((even + odd, even - odd), axis=-1)
        m *= 2
    y = y.reshape(lead + (n,))
    return y / n if inverse else y


def ifft(x: np.ndarray) -> np.ndarray:
    return fft(x, inverse=True)


def fft2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """2-D DFT over the last two axes."""
    y = fft(x, inverse)
    return np.swapaxes(fft(np.swapaxes(y, -1, -2), inverse), -1, -2)


def ifft2(x: np.ndarray) -> np.ndarray:
    return fft2(x, inverse=True)


def wavenumbers(n: int, spacing: float = 1.0) -> np.ndarray:
    """Angular wavenumbers in standard FFT order (0, 1, ..., n/2-1, -n/2, ..., -1)."""
    k = np.arange(n)
    k = np.where(k < n // 2, k, k - n)
    return 2.0 * np.pi * k / (n * spacing)
