"""Temporal gating of the two forecast paths and the training losses."""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .fusion import linear
from .tensor import Tensor


def historical_projection(x, weight: Tensor) -> Tensor:
    """Map the full input window along time: out[p, c] = sum_t weight[t, p] * x[t, c].

    ``x`` is (..., T_in, C) and ``weight`` is (T_in, T_p).
    """
    x = T.as_tensor(x)
    if x.shape[-2] != weight.shape[0]:
        raise ShapeError(f"history of length {x.shape[-2]} does not match projection {weight.shape}")
    return T.matmul(T.transpose(weight), x)


def temporal_gate(recent: Tensor, history: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-step sigmoid gate between the recent and historical forecasts."""
    if recent.shape != history.shape:
        raise ShapeError(f"gate inputs differ in shape: {recent.shape} vs {history.shape}")
    g = T.sigmoid(linear(T.concat([recent, history], axis=-1), weight, bias))
    # g*r + (1-g)*h, written so that r == h gives exactly r
    return T.add(history, T.mul(g, T.sub(recent, history)))


def loss_pred(pred, target) -> Tensor:
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    d = T.sub(pred, target)
    return T.reduce("mean", T.mul(d, d))


def _per_sample_norms(z: Tensor) -> Tensor:
    z = T.as_tensor(z)
    flat = T.reshape(z, (z.shape[0], -1))
    return T.reduce("l2_norm", flat, axis=1)


def loss_div(expert_outputs: Sequence) -> Tensor:
    """Population std of the experts' L2 norms, averaged over the batch.

    Each output has the batch on axis 0.
    """
    if not expert_outputs:
        raise ConfigError("loss_div needs at least one expert")
    norms = T.stack([_per_sample_norms(z) for z in expert_outputs], axis=1)  # B,E
    dev = T.sub(norms, T.reduce("mean", norms, axis=1, keepdims=True))
    var = T.reduce("mean", T.mul(dev, dev), axis=1)
    return T.reduce("mean", T.sqrt(var))


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    """Per-sample cosine similarity, defined as 0 when either side is all zero."""
    fa = T.reshape(a, (a.shape[0], -1))
    fb = T.reshape(b, (b.shape[0], -1))
    if fa.shape != fb.shape:
        raise ShapeError(f"cannot compare {a.shape} with {b.shape}")
    dot = T.reduce("sum", T.mul(fa, fb), axis=1)
    denom = T.mul(T.reduce("l2_norm", fa, axis=1), T.reduce("l2_norm", fb, axis=1))
    ok = denom.data > 0
    safe = T.add(denom, Tensor((~ok).astype(np.float64)))
    return T.mul(T.div(dot, safe), Tensor(ok.astype(np.float64)))


def loss_cons(fourier_z: Sequence, wavelet_z: Sequence) -> Tensor:
    """Mean over experts and batch of ``1 - cos(fourier_e, wavelet_e)``."""
    if len(fourier_z) != len(wavelet_z) or not fourier_z:
        raise ConfigError("loss_cons needs matching, non-empty expert lists")
    terms = [T.reduce("mean", T.sub(1.0, _cosine(T.as_tensor(a), T.as_tensor(b))))
             for a, b in zip(fourier_z, wavelet_z)]
    return T.scale(T.reduce("sum", T.stack(terms)), 1.0 / len(terms))


def wavelet_profile(z: Tensor, length: int) -> Tensor:
    """Reduce a (B, C, S, N) expert map to a (B, length, C) time profile."""
    m = T.reduce("mean", z, axis=2)  # B,C,N
    return T.swapaxes(m[:, :, :length], 1, 2)


def loss_total(pred, div, cons, weights: Dict[str, float] | tuple) -> Tensor:
    if isinstance(weights, dict):
        lam, mu = weights["lambda"], weights["mu"]
    else:
        lam, mu = weights
    if lam < 0 or mu < 0:
        raise ConfigError("loss weights must be non-negative")
    parts = [T.as_tensor(p) for p in (pred, div, cons)]
    if not all(np.isfinite(p.data).all() for p in parts):
        raise NumericError("non-finite loss component")
    total = parts[0]
    if lam:
        total = T.add(total, T.scale(parts[1], lam))
    if mu:
        total = T.add(total, T.scale(parts[2], mu))
    return total
