"""Fourier-view and wavelet-view expert branches.

Inputs are batched differenced segments ``dx`` of shape (B, N, C).  The
spectral transforms of ``dx`` do not depend on any parameter, so they are
computed once in numpy (:func:`fourier_features`, :func:`wavelet_features`)
and the branches only put the learnable parts on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .bands import SpectralMasks, bin_frequencies, soft_membership, soft_shares
from .errors import ConfigError, DataError, ShapeError
from .fusion import linear
from .spectral import ScaleGrid, WaveletSpec, cwt, irfft, power_spectrogram, rfft, rfft_weights
from .tensor import Tensor

STD_FLOOR_VAR = 1e-5
MIN_SEGMENT = 3  # differenced length; a recent segment of 4 points


def _check_segment(dx) -> np.ndarray:
    dx = np.asarray(dx, dtype=np.float64)
    if dx.ndim == 2:
        dx = dx[None]
    if dx.ndim != 3:
        raise ShapeError(f"expected (B, N, C) segments, got shape {dx.shape}")
    if dx.shape[1] < MIN_SEGMENT:
        raise ConfigError(f"recent segment too short: {dx.shape[1] + 1} < 4")
    if not np.isfinite(dx).all():
        raise DataError("non-finite values in branch input")
    return dx


@dataclass
class FourierFeatures:
    spectrum: np.ndarray  # (B, C, F) complex, standardized input
    n: int

    @property
    def n_bins(self) -> int:
        return self.spectrum.shape[-1]

    def summary(self) -> np.ndarray:
        """Channel-averaged magnitude spectrum, (B, F)."""
        return np.abs(self.spectrum).mean(axis=1)

    def energy(self) -> np.ndarray:
        """Per-bin energy with Hermitian multiplicity, channel-averaged."""
        return (rfft_weights(self.n) * np.abs(self.spectrum) ** 2).mean(axis=1)

    def expert_signals(self, mask: np.ndarray) -> np.ndarray:
        """irfft of each masked spectrum -> (B, E, N, C)."""
        masked = self.spectrum[:, None, :, :] * mask[None, :, None, :]
        z = irfft(masked, self.n)  # B,E,C,N
        return np.ascontiguousarray(np.swapaxes(z, -1, -2))


def fourier_features(dx) -> FourierFeatures:
    dx = _check_segment(dx)
    mu = dx.mean(axis=1, keepdims=True)
    var = np.maximum(dx.var(axis=1, keepdims=True), STD_FLOOR_VAR)
    z = (dx - mu) / np.sqrt(var)
    return FourierFeatures(rfft(np.swapaxes(z, 1, 2)), dx.shape[1])


@dataclass
class WaveletFeatures:
    power: np.ndarray  # (B, C, S, N)
    grid: ScaleGrid

    def summary(self) -> np.ndarray:
        """Flattened channel-mean spectrogram, (B, S*N)."""
        p = self.power.mean(axis=1)
        return p.reshape(p.shape[0], -1)

    def energy(self) -> np.ndarray:
        """Per-scale energy on the da/a^2 measure, channel-averaged -> (B, S)."""
        measure = self.grid.log_steps() / self.grid.array()
        return measure * self.power.mean(axis=1).sum(axis=-1)


def wavelet_features(dx, grid: ScaleGrid, spec: WaveletSpec) -> WaveletFeatures:
    dx = _check_segment(dx)
    w = cwt(np.swapaxes(dx, 1, 2), grid, spec)  # B,C,S,N
    return WaveletFeatures(power_spectrogram(w), grid)


def routing(summary, params: Dict[str, Tensor], prefix: str) -> Tensor:
    """Two-layer ReLU network with a softmax over experts."""
    h = T.relu(linear(summary, params[f"{prefix}.route1.weight"], params[f"{prefix}.route1.bias"]))
    return T.softmax(linear(h, params[f"{prefix}.route2.weight"], params[f"{prefix}.route2.bias"]), axis=-1)


def fourier_routing(summary, params: Dict[str, Tensor], prefix: str = "fourier") -> Tensor:
    summary = T.as_tensor(summary)
    width = params[f"{prefix}.route1.weight"].shape[1]
    if summary.shape[-1] != width:
        raise ShapeError(f"routing summary has length {summary.shape[-1]}, expected {width}")
    return routing(summary, params, prefix)


def fourier_shares(feats: FourierFeatures, beta: Tensor) -> Tensor:
    f = feats.n_bins
    member = soft_membership(beta, bin_frequencies(f), tau=0.5 / max(f - 1, 1))
    return soft_shares(feats.energy(), member)


def wavelet_shares(feats: WaveletFeatures, beta: Tensor, spec: WaveletSpec) -> Tensor:
    freqs = feats.grid.frequencies(spec)
    tau = 0.5 * float(np.mean(np.abs(np.diff(np.log(feats.grid.array()))))) if feats.grid.count > 1 else 1.0
    member = soft_membership(beta, freqs, tau=tau, log_axis=True)
    return soft_shares(feats.energy(), member)


@dataclass
class BranchTrace:
    weights: Tensor  # (B, E) routing weights
    experts: list  # E expert outputs, each with batch on axis 0


def _mix(weights: Tensor, stacked) -> Tensor:
    """Sum_e w[:, e] * z[:, e] for z of shape (B, E, ...)."""
    z = T.as_tensor(stacked)
    b, e = z.shape[:2]
    rest = z.shape[2:]
    flat = T.reshape(z, (b, e, int(np.prod(rest))))
    out = T.matmul(T.reshape(weights, (b, 1, e)), flat)
    return T.reshape(out, (b,) + rest)


def fourier_branch(feats: FourierFeatures, masks: SpectralMasks, params: Dict[str, Tensor],
                   prefix: str = "fourier", shares: Optional[Tensor] = None):
    """Masked spectra -> routed sum -> irfft -> time projection.

    Returns ``(V_tilde (B, T_p, C), BranchTrace)``.  ``shares`` (B, E) are
    appended to the routing summary when the model uses soft band shares.
    """
    if masks.fourier.shape[1] != feats.n_bins:
        raise ShapeError(f"fourier masks cover {masks.fourier.shape[1]} bins, spectrum has {feats.n_bins}")
    z = feats.expert_signals(masks.fourier)  # B,E,N,C constants
    summary = Tensor(feats.summary())
    if shares is not None:
        summary = T.concat([summary, shares], axis=-1)
    alpha = fourier_routing(summary, params, prefix)
    mixed = _mix(alpha, z)  # B,N,C
    out = T.add(T.matmul(params[f"{prefix}.proj.weight"], mixed), params[f"{prefix}.proj.bias"])
    return out, BranchTrace(alpha, [z[:, e] for e in range(z.shape[1])])


def wavelet_expert_block(p_e, params: Dict[str, Tensor], prefix: str, training: bool,
                         dropout: float = 0.0, rng=None) -> Tensor:
    """conv -> ReLU -> dropout -> conv over (scale, time), same padding."""
    h = T.conv2d(p_e, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"])
    h = T.dropout(T.relu(h), dropout, training, rng)
    return T.conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"])


def wavelet_branch(feats: WaveletFeatures, masks: SpectralMasks, params: Dict[str, Tensor],
                   prefix: str = "wavelet", training: bool = False, dropout: float = 0.0,
                   rng=None, shares: Optional[Tensor] = None):
    """Scale-masked spectrogram experts, routed and projected to (B, T_p, C)."""
    power = feats.power
    b, c, s, n = power.shape
    if masks.wavelet.shape[1] != s:
        raise ShapeError(f"wavelet masks cover {masks.wavelet.shape[1]} scales, spectrogram has {s}")
    outs: List[Tensor] = []
    for e in range(masks.experts):
        p_e = power * masks.wavelet[e][None, None, :, None]
        outs.append(wavelet_expert_block(p_e, params, f"{prefix}.expert{e}", training, dropout, rng))
    summary = Tensor(feats.summary())
    if shares is not None:
        summary = T.concat([summary, shares], axis=-1)
    eta = routing(summary, params, prefix)
    flat = T.stack([T.reshape(z, (b, c * s * n)) for z in outs], axis=1)  # B,E,CSN
    h = T.reshape(_mix(eta, flat), (b, c * s, n))
    h = linear(h, params[f"{prefix}.out2.weight"], params[f"{prefix}.out2.bias"])  # B,CS,T_p
    h = T.swapaxes(h, 1, 2)
    out = linear(h, params[f"{prefix}.out1.weight"], params[f"{prefix}.out1.bias"])  # B,T_p,C
    return out, BranchTrace(eta, outs)
