import numpy as np
import pytest

from dmtlr.fft import fft, fft2, ifft, ifft2, is_power_of_two, wavenumbers


def naive_dft(x):
    n = x.shape[-1]
    k = np.arange(n)
    w = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ w.T


@pytest.mark.parametrize("n", [1, 2, 4, 8, 32, 64])
def test_fft_matches_direct_dft(n):
    x = np.random.default_rng(n).normal(size=(3, n)) + 1j * np.random.default_rng(n + 1).normal(size=(3, n))
    np.testing.assert_allclose(fft(x), naive_dft(x), rtol=0, atol=1e-11 * max(n, 1))


def test_inverse_round_trip():
    x = np.random.default_rng(0).normal(size=(16, 32))
    np.testing.assert_allclose(ifft(fft(x)).real, x, atol=1e-13)
    np.testing.assert_allclose(ifft2(fft2(x)).real, x, atol=1e-13)


def test_delta_spectrum_is_flat():
    x = np.zeros(8)
    x[0] = 1.0
    np.testing.assert_allclose(fft(x), np.ones(8), atol=1e-15)


def test_rejects_non_power_of_two():
    assert is_power_of_two(64) and not is_power_of_two(48) and not is_power_of_two(0)
    with pytest.raises(ValueError):
        fft(np.zeros(12))


def test_wavenumbers_layout():
    k = wavenumbers(8)
    np.testing.assert_allclose(k, 2 * np.pi * np.array([0, 1, 2, 3, -4, -3, -2, -1]) / 8)
