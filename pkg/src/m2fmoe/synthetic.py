"""Synthetic hourly series with daily seasonality, AR noise and flood-like spikes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RawSeries


@dataclass(frozen=True)
class SyntheticSeries:
    values: np.ndarray  # (length,)
    spikes: np.ndarray  # onset index of every spike
    sigma: float  # stationary std of the AR noise; spike heights are multiples of it

    def to_raw(self, channel: str = "level") -> RawSeries:
        return RawSeries(np.arange(len(self.values), dtype=np.int64), self.values[:, None], (channel,))


def spike_shape(length: int, rise: int, decay: float) -> np.ndarray:
    """Unit-peak pulse: linear rise over ``rise`` steps, then exponential recession."""
    t = np.arange(length, dtype=np.float64)
    up = np.clip((t + 1) / rise, 0, 1)
    down = np.exp(-np.maximum(t - (rise - 1), 0) / decay)
    return up * down


def generate(length: int = 4000, n_spikes: int = 12, period: int = 24, ar: float = 0.9,
             amplitude: float = 2.0, noise: float = 0.5, spike_sigmas=(8.0, 15.0),
             seed: int = 0, margin: int = 48) -> SyntheticSeries:
    """Daily cycle + AR(1) noise + ``n_spikes`` pulses of 8-15 noise sigmas.

    Spike onsets are spread over the series (one per equal slot, jittered
    inside it) so every chronological split sees some of them.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    t = np.arange(length, dtype=np.float64)
    seasonal = amplitude * np.sin(2 * np.pi * t / period) + 0.5 * amplitude * np.sin(4 * np.pi * t / period + 1.0)
    eps = rng.normal(0.0, noise, size=length)
    arn = np.empty(length)
    arn[0] = eps[0] / np.sqrt(1 - ar * ar)
    for i in range(1, length):
        arn[i] = ar * arn[i - 1] + eps[i]
    base = 10.0 + seasonal + arn
    sigma = noise / np.sqrt(1 - ar * ar)
    slot = (length - 2 * margin) / n_spikes
    onsets = []
    values = base.copy()
    for k in range(n_spikes):
        lo = margin + int(k * slot)
        hi = margin + int((k + 1) * slot) - margin
        s = int(rng.integers(lo, max(hi, lo + 1)))
        height = rng.uniform(*spike_sigmas) * sigma
        rise = int(rng.integers(2, 5))
        decay = rng.uniform(6.0, 16.0)
        n = min(length - s, 120)
        values[s:s + n] += height * spike_shape(n, rise, decay)
        onsets.append(s)
    return SyntheticSeries(values, np.asarray(onsets, dtype=np.int64), sigma)
