"""Shared frequency band splitter for the Fourier and wavelet views.

Boundaries live on the Nyquist-normalized axis ``f in (0, 1)``.  The Fourier
view scales them to rfft bin indices; the wavelet view maps them to scales
through ``a = gamma / f``.  Expert 0 always owns the lowest band, so in the
wavelet view it owns the *largest* scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, CoverageError, PartitionError
from .spectral import ScaleGrid, WaveletSpec, rfft_weights
from .tensor import Tensor


@dataclass(frozen=True)
class SpectralMasks:
    fourier: np.ndarray  # (E, F) 0/1
    wavelet: np.ndarray  # (E, S) 0/1

    @property
    def experts(self) -> int:
        return self.fourier.shape[0]


def normalize_boundaries(raw) -> Tensor:
    """Cumulative softmax: E logits -> E-1 increasing boundaries in (0, 1)."""
    raw = T.as_tensor(raw)
    if raw.ndim != 1 or raw.shape[0] < 1:
        raise ConfigError(f"boundary logits must be a non-empty vector, got shape {raw.shape}")
    e = raw.shape[0]
    if e == 1:
        return Tensor(np.zeros(0))
    widths = T.softmax(raw, axis=0)
    lower = np.tril(np.ones((e - 1, e)))
    return T.reshape(T.matmul(Tensor(lower), T.reshape(widths, (e, 1))), (e - 1,))


def _repair(idx: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Make indices strictly increasing inside [lo, hi] (nearest feasible)."""
    k = len(idx)
    out = np.array(idx, dtype=np.int64)
    for i in range(k):
        floor = lo + i if i == 0 else out[i - 1] + 1
        out[i] = max(out[i], floor)
    for i in range(k - 1, -1, -1):
        ceil = hi - (k - 1 - i)
        out[i] = min(out[i], ceil)
    for i in range(1, k):
        out[i] = max(out[i], out[i - 1] + 1)
    return out


def to_fourier_indices(beta, n_bins: int) -> np.ndarray:
    """Boundary bins ``round(beta * (F - 1))``, repaired so every band keeps a bin."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    experts = len(beta) + 1
    if n_bins < experts:
        raise PartitionError(f"{n_bins} frequency bins cannot hold {experts} bands")
    raw = np.floor(beta * (n_bins - 1) + 0.5).astype(np.int64)
    return _repair(raw, 1, n_bins - 1)


def scale_for_frequency(f, gamma: float):
    """``a = gamma / f`` for Nyquist-normalized frequency ``f``."""
    return gamma / np.asarray(f, dtype=np.float64)


def to_wavelet_scales(beta, gamma: float, grid: ScaleGrid, strict: bool = True) -> np.ndarray:
    """Ascending scale-index cuts for the wavelet masks.

    Boundary ``beta_i`` maps to scale ``gamma / beta_i``; the cut is the
    number of grid scales whose equivalent frequency is >= beta_i, so the
    scales below the cut belong to the higher bands.  Cuts are returned in
    ascending scale order, i.e. reversed relative to ``beta``.
    """
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    experts = len(beta) + 1
    s = grid.array()
    if grid.count < experts:
        raise PartitionError(f"{grid.count} scales cannot hold {experts} bands")
    a = scale_for_frequency(beta, gamma) if len(beta) else np.zeros(0)
    if strict:
        for ai in a:
            if not s[0] <= ai <= s[-1]:
                raise CoverageError(
                    f"boundary scale {ai:.4g} outside grid [{s[0]:.4g}, {s[-1]:.4g}]")
    cuts = np.searchsorted(s, a * (1 + 1e-12), side="right")[::-1]
    return _repair(cuts, 1, grid.count - 1)


def build_masks(fourier_idx, wavelet_idx, n_bins: int, n_scales: int, experts: int) -> SpectralMasks:
    fourier_idx = np.asarray(fourier_idx, dtype=np.int64).reshape(-1)
    wavelet_idx = np.asarray(wavelet_idx, dtype=np.int64).reshape(-1)
    for name, idx, top in (("fourier", fourier_idx, n_bins), ("wavelet", wavelet_idx, n_scales)):
        if len(idx) != experts - 1:
            raise PartitionError(f"{name}: expected {experts - 1} cuts, got {len(idx)}")
        if len(idx) and (np.any(np.diff(idx) <= 0) or idx[0] <= 0 or idx[-1] >= top):
            raise PartitionError(f"{name} cuts {idx.tolist()} do not partition 0..{top - 1}")
    f_edges = np.concatenate([[0], fourier_idx, [n_bins]])
    w_edges = np.concatenate([[0], wavelet_idx, [n_scales]])
    fm = np.zeros((experts, n_bins))
    wm = np.zeros((experts, n_scales))
    for e in range(experts):
        fm[e, f_edges[e]:f_edges[e + 1]] = 1.0
        r = experts - 1 - e  # wavelet ranges run from high frequency to low
        wm[e, w_edges[r]:w_edges[r + 1]] = 1.0
    return SpectralMasks(fm, wm)


def masks_from_beta(beta, n_bins: int, grid: ScaleGrid, spec: WaveletSpec,
                    wavelet_beta=None) -> SpectralMasks:
    """Masks for both views; ``wavelet_beta`` lets the wavelet view use its own boundaries."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    wb = beta if wavelet_beta is None else np.asarray(wavelet_beta, dtype=np.float64).reshape(-1)
    fr = grid.frequencies(spec)
    wb = np.clip(wb, fr.min(), fr.max())
    experts = len(beta) + 1
    return build_masks(to_fourier_indices(beta, n_bins),
                       to_wavelet_scales(wb, spec.gamma, grid, strict=False),
                       n_bins, grid.count, experts)


def bin_frequencies(n_bins: int) -> np.ndarray:
    """Normalized frequency of each rfft bin on the same axis as the index map."""
    return np.arange(n_bins) / max(n_bins - 1, 1)


def soft_membership(beta: Tensor, positions: np.ndarray, tau: float, log_axis: bool = False) -> Tensor:
    """Smooth (E, L) band membership of each position, differentiable in beta.

    Hard masks block gradients; this relaxation is what lets the boundary
    logits learn through the routing networks.
    """
    beta = T.as_tensor(beta)
    k = beta.shape[0]
    pos = np.asarray(positions, dtype=np.float64).reshape(1, -1)
    if k == 0:
        return Tensor(np.ones((1, pos.shape[1])))
    b = T.reshape(beta, (k, 1))
    if log_axis:
        b = T.log(b)
        pos = np.log(pos)
    above = T.sigmoid(T.scale(T.sub(Tensor(pos), b), 1.0 / tau))  # (k, L)
    length = pos.shape[1]
    edges = T.concat([Tensor(np.ones((1, length))), above, Tensor(np.zeros((1, length)))], axis=0)
    return T.sub(edges[:-1], edges[1:])


def soft_shares(energy: np.ndarray, membership: Tensor) -> Tensor:
    """Fraction of each sample's energy falling in each soft band -> (B, E)."""
    energy = np.asarray(energy, dtype=np.float64)
    total = energy.sum(axis=-1, keepdims=True)
    norm = energy / np.where(total > 0, total, 1.0)
    return T.matmul(Tensor(norm), T.transpose(membership))


def band_energy(view: str, data, mask, n: int | None = None, grid: ScaleGrid | None = None) -> float:
    """Energy of one band.

    fourier: ``data`` is an rfft spectrum of a length-``n`` signal; bins are
    weighted by their multiplicity in the full spectrum so the all-ones mask
    reproduces Parseval's ``N * sum(x**2)``.
    wavelet: ``data`` holds CWT coefficients (S, N); the scale sum uses the
    ``da / a**2`` measure on the grid.
    """
    mask = np.asarray(mask, dtype=np.float64)
    data = np.asarray(data)
    if view == "fourier":
        if n is None:
            raise ConfigError("fourier band energy needs the signal length n")
        if data.shape[-1] != mask.shape[-1]:
            raise ConfigError(f"mask length {mask.shape[-1]} != spectrum length {data.shape[-1]}")
        return float(np.sum(rfft_weights(n) * mask * np.abs(data) ** 2))
    if view == "wavelet":
        if grid is None:
            raise ConfigError("wavelet band energy needs the scale grid")
        if data.shape[-2] != mask.shape[-1]:
            raise ConfigError(f"mask length {mask.shape[-1]} != scale count {data.shape[-2]}")
        a = grid.array()
        measure = grid.log_steps() / a  # da / a^2 with da = a * dlog(a)
        per_scale = (np.abs(data) ** 2).sum(axis=-1)
        return float(np.sum(mask * measure * per_scale))
    raise ConfigError(f"unknown view {view!r}")
