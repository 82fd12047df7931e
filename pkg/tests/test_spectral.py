import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2fmoe.errors import ConfigError, DataError, LengthError, ShapeError
from m2fmoe.spectral import (ScaleGrid, WaveletSpec, cwt, fft, ifft, irfft, power_spectrogram, rfft,
                             rfft_weights, wavelet_center_frequency)


def _dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


@pytest.mark.parametrize("n", [2, 3, 5, 8, 16, 17, 60, 64, 100, 119, 128, 255, 256, 360, 511, 512])
def test_rfft_matches_direct_dft(n):
    x = np.random.default_rng(n).normal(size=n)
    ref = _dft(x)[: n // 2 + 1]
    got = rfft(x)
    assert np.max(np.abs(got - ref)) <= 1e-9 * np.max(np.abs(ref))


def test_fft_complex_and_inverse():
    rng = np.random.default_rng(0)
    for n in (7, 32, 45):
        z = rng.normal(size=n) + 1j * rng.normal(size=n)
        assert np.allclose(fft(z), _dft(z), atol=1e-10)
        assert np.allclose(ifft(fft(z)), z, atol=1e-12)


def test_fft_batched_last_axis():
    x = np.random.default_rng(1).normal(size=(3, 4, 20))
    assert np.allclose(fft(x), np.fft.fft(x, axis=-1), atol=1e-11)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 512), st.integers(0, 10_000))
def test_rfft_roundtrip_and_parseval(n, seed):
    x = np.random.default_rng(seed).normal(size=n)
    s = rfft(x)
    assert np.max(np.abs(irfft(s, n) - x)) < 1e-10
    energy = np.sum(rfft_weights(n) * np.abs(s) ** 2)
    assert abs(energy - n * np.sum(x * x)) <= 1e-9 * n * np.sum(x * x)


def test_rfft_errors():
    with pytest.raises(LengthError):
        rfft(np.ones(1))
    with pytest.raises(ShapeError):
        irfft(np.ones(5), 12)


def test_rfft_of_constant_is_dc_only():
    s = rfft(np.full(10, 2.0))
    assert abs(s[0] - 20) < 1e-12
    assert np.max(np.abs(s[1:])) < 1e-12


@pytest.mark.parametrize("order", range(1, 9))
def test_center_frequency_closed_form(order):
    spec = WaveletSpec.cgau(order)
    closed = (1 + np.sqrt(1 + 8 * order)) / (4 * np.pi)
    assert abs(spec.center_frequency - closed) < 1e-3
    assert wavelet_center_frequency(spec) == spec.center_frequency


def test_wavelet_unit_energy_and_admissible():
    spec = WaveletSpec.cgau(7)
    t = np.linspace(-spec.support, spec.support, 40001)
    energy = np.trapezoid(np.abs(spec(t)) ** 2, t)
    assert abs(energy - 1) < 1e-6
    assert 0 < spec.admissibility < np.inf
    assert spec.gamma == pytest.approx(2 * spec.center_frequency)


def test_wavelet_order_bounds():
    with pytest.raises(ConfigError):
        WaveletSpec.cgau(0)
    with pytest.raises(ConfigError):
        WaveletSpec.cgau(9)


def test_scale_grid_geometric_and_nyquist():
    spec = WaveletSpec.cgau(7)
    g = ScaleGrid.for_length(spec, 119, 16)
    a = g.array()
    assert g.count == 16
    assert np.allclose(a[1:] / a[:-1], a[1] / a[0])
    assert spec.center_frequency / a[0] == pytest.approx(0.5)
    assert g.frequencies(spec)[0] == pytest.approx(1.0)
    assert g.frequencies(spec)[-1] == pytest.approx(2.0 / 119)
    assert np.allclose(g.log_steps(), np.log(a[1] / a[0]))


def test_scale_grid_validation():
    with pytest.raises(ConfigError):
        ScaleGrid((2.0, 1.0))
    with pytest.raises(ConfigError):
        ScaleGrid.geometric(0.0, 1.0, 4)


def _cwt_oracle(x, grid, spec):
    """Direct sum with an independently sampled kernel."""
    n = len(x)
    out = np.zeros((grid.count, n), dtype=complex)
    for i, a in enumerate(grid.array()):
        for b in range(n):
            u = (np.arange(n) - b) / a
            k = np.where(np.abs(u) <= spec.support, np.conj(spec(u)), 0)
            out[i, b] = np.sum(x * k) / np.sqrt(a)
    return out


def test_cwt_matches_direct_sum_both_routes():
    spec = WaveletSpec.cgau(7)
    x = np.random.default_rng(2).normal(size=40)
    g = ScaleGrid.for_length(spec, 40, 6)
    ref = _cwt_oracle(x, g, spec)
    for method in ("direct", "fft"):
        assert np.allclose(cwt(x, g, spec, method=method), ref, atol=1e-10)


def test_cwt_batched_and_power():
    spec = WaveletSpec.cgau(7)
    g = ScaleGrid.for_length(spec, 30, 5)
    x = np.random.default_rng(3).normal(size=(2, 3, 30))
    w = cwt(x, g, spec)
    assert w.shape == (2, 3, 5, 30)
    assert np.allclose(w[1, 2], cwt(x[1, 2], g, spec))
    assert np.allclose(power_spectrogram(w), np.abs(w) ** 2)


def test_cwt_errors():
    spec = WaveletSpec.cgau(7)
    g = ScaleGrid.for_length(spec, 30, 5)
    with pytest.raises(LengthError):
        cwt(np.ones(3), g, spec)
    with pytest.raises(DataError):
        cwt(np.array([1.0, np.nan, 0, 0, 0]), g, spec)
    with pytest.raises(ConfigError):
        cwt(np.ones(10), g, spec, method="magic")


def test_sinusoid_peaks_at_matching_scale():
    spec = WaveletSpec.cgau(7)
    n = 256
    g = ScaleGrid.geometric(spec.gamma, spec.center_frequency * n, 32)
    for f in (0.05, 0.1, 0.2, 0.35):
        x = np.sin(2 * np.pi * f * np.arange(n))
        p = power_spectrogram(cwt(x, g, spec))[:, 64:-64].sum(axis=1)
        expected = spec.center_frequency / f
        peak = g.array()[np.argmax(p)]
        assert abs(np.log(peak / expected)) < np.log(g.array()[1] / g.array()[0])
