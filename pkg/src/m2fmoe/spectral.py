"""Fourier and wavelet transforms.

The FFT is an iterative radix-2 decimation-in-time transform; other lengths
go through Bluestein's chirp-z reformulation on a power-of-two grid.  All
transforms act on the last axis and accept arbitrary leading batch axes.

The continuous wavelet transform uses the complex Gaussian family
``cgau<p>``: the p-th derivative of ``exp(-i t) exp(-t^2)``, normalized to
unit L2 norm.  Coefficients follow

    W(a, b) = a**-0.5 * sum_t x[t] * conj(psi((t - b) / a))

with the signal zero-extended outside ``0..N-1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import ConfigError, DataError, LengthError, ShapeError

SUPPORT_CUTOFF = 1e-8


# --------------------------------------------------------------------- FFT


@lru_cache(maxsize=64)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    lead = x.shape[:-1]
    y = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        y = y.reshape(lead + (n // size, size))
        even = y[..., :half]
        odd = y[..., half:] * _twiddles(size)
        y = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return y.reshape(lead + (n,))


@lru_cache(maxsize=64)
def _bluestein_plan(n: int) -> Tuple[np.ndarray, np.ndarray, int]:
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase exact for large k
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << int(np.ceil(np.log2(2 * n - 1)))
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    return chirp, _fft_pow2(b), m


def _fft_bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    chirp, b_hat, m = _bluestein_plan(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    a[..., :n] = x * chirp
    conv = _ifft_pow2(_fft_pow2(a) * b_hat)
    return conv[..., :n] * chirp


def _ifft_pow2(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(x))) / x.shape[-1]


def fft(x) -> np.ndarray:
    """Complex DFT along the last axis: ``X[n] = sum_t x[t] exp(-2j pi n t / N)``."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    if n == 0:
        raise LengthError("fft of an empty sequence")
    if n & (n - 1) == 0:
        return _fft_pow2(x)
    return _fft_bluestein(x)


def ifft(x) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


def rfft(x) -> np.ndarray:
    """Non-negative frequency half of the DFT of a real sequence (length N//2 + 1)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise LengthError(f"rfft needs at least 2 samples, got {n}")
    return fft(x)[..., : n // 2 + 1]


def irfft(spectrum, n: int) -> np.ndarray:
    """Inverse of :func:`rfft` for a real sequence of length ``n``."""
    spectrum = np.asarray(spectrum, dtype=complex)
    if n < 2 or spectrum.shape[-1] != n // 2 + 1:
        raise ShapeError(f"irfft: spectrum of length {spectrum.shape[-1]} does not match n={n}")
    full = np.empty(spectrum.shape[:-1] + (n,), dtype=complex)
    full[..., : n // 2 + 1] = spectrum
    tail = np.arange(n // 2 + 1, n)
    full[..., tail] = np.conj(spectrum[..., n - tail])
    # imaginary parts of DC / Nyquist are not representable in a real signal
    full[..., 0] = full[..., 0].real
    if n % 2 == 0:
        full[..., n // 2] = full[..., n // 2].real
    return ifft(full).real


def rfft_weights(n: int) -> np.ndarray:
    """Multiplicity of each rfft bin in the full spectrum (1 for DC/Nyquist, else 2)."""
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


# ----------------------------------------------------------------- wavelets


def _cgau_poly(order: int) -> np.ndarray:
    # d/dt [p(t) g(t)] = (p'(t) + p(t) (-i - 2t)) g(t)   with g = exp(-i t - t^2)
    poly = np.array([1.0 + 0j])
    factor = np.array([-1j, -2.0])
    for _ in range(order):
        poly = P.polyadd(P.polyder(poly), P.polymul(poly, factor))
    return poly


def _cgau_raw(t: np.ndarray, order: int) -> np.ndarray:
    return P.polyval(t, _cgau_poly(order)) * np.exp(-1j * t - t * t)


@dataclass(frozen=True)
class WaveletSpec:
    """Complex Gaussian mother wavelet of a given order.

    ``center_frequency`` is in cycles per unit of the wavelet's time
    argument, i.e. cycles per sample at scale 1; a scale ``a`` responds
    most strongly to ``center_frequency / a`` cycles per sample.
    """

    order: int
    norm: float
    support: float
    center_frequency: float
    admissibility: float

    @property
    def gamma(self) -> float:
        """Frequency-to-scale constant ``f0 / f_nyq`` (Nyquist = 0.5 cycles/sample)."""
        return self.center_frequency / 0.5

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.norm * _cgau_raw(t, self.order)

    @classmethod
    def cgau(cls, order: int = 7, resolution: int = 1 << 16) -> "WaveletSpec":
        return _build_spec(order, resolution)


@lru_cache(maxsize=16)
def _build_spec(order: int, resolution: int) -> WaveletSpec:
    if not 1 <= order <= 8:
        raise ConfigError(f"complex Gaussian order must be in 1..8, got {order}")
    # numerical support: |psi| falls below the cutoff relative to its peak
    t = np.linspace(0.0, 20.0, 20001)
    mag = np.abs(_cgau_raw(t, order))
    above = np.nonzero(mag >= SUPPORT_CUTOFF * mag.max())[0]
    support = float(t[above[-1]])
    dt = 2 * support / 4096
    tt = np.arange(-support, support + dt / 2, dt)
    energy = np.sum(np.abs(_cgau_raw(tt, order)) ** 2) * dt
    norm = 1.0 / np.sqrt(energy)
    f0, c_psi = _spectrum_stats(order, norm, support, resolution)
    return WaveletSpec(order, norm, support, f0, c_psi)


def _spectrum_stats(order: int, norm: float, support: float, resolution: int) -> Tuple[float, float]:
    """Peak frequency and admissibility constant from the sampled spectrum."""
    dt = 1.0 / 64
    tt = np.arange(-support, support, dt)
    psi = norm * _cgau_raw(tt, order)
    m = max(resolution, 1 << int(np.ceil(np.log2(len(tt)))))
    padded = np.zeros(m, dtype=complex)
    padded[: len(tt)] = psi
    spec = np.abs(fft(padded)) * dt
    freqs = np.arange(m) / (m * dt)
    freqs = np.where(freqs > 0.5 / dt, freqs - 1.0 / dt, freqs)
    if not np.isfinite(spec).all() or spec.max() <= 0:
        raise DataError("wavelet spectrum is degenerate")
    k = int(np.argmax(spec))
    # parabolic refinement of the peak bin
    y0, y1, y2 = spec[(k - 1) % m], spec[k], spec[(k + 1) % m]
    denom = y0 - 2 * y1 + y2
    shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
    f0 = abs(freqs[k] + shift / (m * dt))
    omega = 2 * np.pi * np.abs(freqs)
    nz = omega > 0
    c_psi = float(np.sum(spec[nz] ** 2 / omega[nz]) * 2 * np.pi / (m * dt))
    return float(f0), c_psi


def wavelet_center_frequency(spec: WaveletSpec) -> float:
    return spec.center_frequency


@dataclass(frozen=True)
class ScaleGrid:
    scales: Tuple[float, ...]

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=np.float64)
        if s.ndim != 1 or s.size == 0 or (s <= 0).any():
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if (np.diff(s) <= 0).any():
            raise ConfigError("scales must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.scales)

    def array(self) -> np.ndarray:
        return np.asarray(self.scales)

    @classmethod
    def geometric(cls, a_min: float, a_max: float, count: int) -> "ScaleGrid":
        if count < 1 or not 0 < a_min <= a_max:
            raise ConfigError(f"invalid scale range [{a_min}, {a_max}] with {count} scales")
        if count == 1:
            return cls((float(a_min),))
        return cls(tuple(np.geomspace(a_min, a_max, count)))

    @classmethod
    def for_length(cls, spec: WaveletSpec, n: int, count: int = 16) -> "ScaleGrid":
        """Grid from the Nyquist frequency down to one cycle per ``n`` samples."""
        return cls.geometric(spec.gamma, spec.center_frequency * n, count)

    def frequencies(self, spec: WaveletSpec) -> np.ndarray:
        """Nyquist-normalized frequency ``gamma / a`` of every scale."""
        return spec.gamma / self.array()

    def log_steps(self) -> np.ndarray:
        """Local geometric spacing ``da / a`` (central in log a)."""
        s = np.log(self.array())
        if len(s) == 1:
            return np.ones(1)
        edges = np.concatenate([[1.5 * s[0] - 0.5 * s[1]], 0.5 * (s[1:] + s[:-1]), [1.5 * s[-1] - 0.5 * s[-2]]])
        return np.diff(edges)


DIRECT_CWT_MAX_LEN = 256


def _kernel_rows(n: int, a: float, spec: WaveletSpec) -> np.ndarray:
    """conj(psi(m / a)) / sqrt(a) for offsets m = -(n-1) .. n-1, truncated to the support."""
    u = np.arange(-(n - 1), n) / a
    return np.where(np.abs(u) <= spec.support, np.conj(spec(u)), 0.0) / np.sqrt(a)


@lru_cache(maxsize=32)
def _cwt_matrix(n: int, scales: Tuple[float, ...], order: int) -> Tuple[np.ndarray, np.ndarray]:
    # M[t, s, b] = conj(psi((t - b) / a_s)) / sqrt(a_s)
    spec = WaveletSpec.cgau(order)
    t = np.arange(n)
    lag = t[:, None] - t[None, :] + (n - 1)
    mat = np.stack([_kernel_rows(n, a, spec)[lag] for a in scales], axis=1)
    mat = mat.reshape(n, len(scales) * n)
    return np.ascontiguousarray(mat.real), np.ascontiguousarray(mat.imag)


@lru_cache(maxsize=32)
def _cwt_bank(n: int, scales: Tuple[float, ...], order: int) -> Tuple[np.ndarray, int]:
    spec = WaveletSpec.cgau(order)
    m = 1 << int(np.ceil(np.log2(3 * n - 2)))
    bank = np.zeros((len(scales), m), dtype=complex)
    for i, a in enumerate(scales):
        bank[i, : 2 * n - 1] = _kernel_rows(n, a, spec)[::-1]
    return fft(bank), m


def cwt(x, grid: ScaleGrid, spec: WaveletSpec, method: str = "auto") -> np.ndarray:
    """Continuous wavelet transform along the last axis -> (..., S, N) complex.

    ``method`` is "direct" (dense Toeplitz product), "fft" (zero-padded
    fast correlation) or "auto" (direct for short signals).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 4:
        raise LengthError(f"cwt needs at least 4 samples, got {n}")
    if not np.isfinite(x).all():
        raise DataError("cwt input contains non-finite values")
    scales = tuple(float(a) for a in grid.scales)
    if method == "auto":
        method = "direct" if n <= DIRECT_CWT_MAX_LEN else "fft"
    if method == "direct":
        re, im = _cwt_matrix(n, scales, spec.order)
        out = (x @ re) + 1j * (x @ im)
        return out.reshape(x.shape[:-1] + (len(scales), n))
    if method != "fft":
        raise ConfigError(f"unknown cwt method {method!r}")
    bank, m = _cwt_bank(n, scales, spec.order)
    padded = np.zeros(x.shape[:-1] + (m,))
    padded[..., :n] = x
    full = ifft(fft(padded)[..., None, :] * bank)
    # correlation output for shift b sits at index b + n - 1
    return full[..., n - 1: 2 * n - 1]


def power_spectrogram(w) -> np.ndarray:
    w = np.asarray(w)
    return w.real ** 2 + w.imag ** 2
