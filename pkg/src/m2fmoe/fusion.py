"""Recent-segment preprocessing and multi-resolution adaptive fusion.

Arrays are laid out (..., time, channels).  Preprocessing runs on plain
numpy because it only ever touches input data; the fusion stages take
tensors.
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, LengthError, ShapeError
from .tensor import BatchNormState, Tensor


def segment_recent(x, t_recent: int) -> np.ndarray:
    """Trailing ``t_recent`` time steps of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    t_in = x.shape[-2]
    if not 1 <= t_recent <= t_in:
        raise ConfigError(f"recent length {t_recent} must lie in [1, {t_in}]")
    return x[..., t_in - t_recent:, :]


def smooth_conv(x, k: int) -> np.ndarray:
    """Causal moving average of width ``k`` with the first value repeated on the left."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-2]
    if k < 1 or k > n:
        raise ConfigError(f"smoothing width {k} must lie in [1, {n}]")
    if k == 1:
        return x.copy()
    pad = np.repeat(x[..., :1, :], k - 1, axis=-2)
    xp = np.concatenate([pad, x], axis=-2)
    c = np.cumsum(xp, axis=-2)
    zero = np.zeros_like(c[..., :1, :])
    c = np.concatenate([zero, c], axis=-2)
    return (c[..., k:, :] - c[..., :-k, :]) / k


def first_diff(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] < 2:
        raise LengthError("first difference needs at least 2 time steps")
    return np.diff(x, axis=-2)


def positional_embedding(t_pred: int) -> np.ndarray:
    """Two-column sinusoidal encoding; with d=2 the only frequency is 1."""
    if t_pred < 1:
        raise ConfigError("horizon must be positive")
    t = np.arange(t_pred, dtype=np.float64)
    return np.stack([np.sin(t), np.cos(t)], axis=1)


def linear(x, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    y = T.matmul(x, T.transpose(weight))
    return y if bias is None else T.add(y, bias)


def multi_view_fuse(
    views: Sequence[Tensor],
    pos: np.ndarray,
    params: Dict[str, Tensor],
    prefix: str,
    bn_state: BatchNormState,
    training: bool,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Concat views with the positional code, then linear -> BN -> ReLU -> dropout -> linear.

    ``views`` are (B, T_p, C); an ablated view is simply left out, which
    shrinks the first layer's input width.
    """
    if not views:
        raise ShapeError("multi_view_fuse needs at least one view")
    b, tp, _ = views[0].shape
    for v in views:
        if v.shape != views[0].shape:
            raise ShapeError(f"view shapes differ: {[v.shape for v in views]}")
    if pos.shape != (tp, 2):
        raise ShapeError(f"positional code {pos.shape} does not match horizon {tp}")
    enc = Tensor(np.broadcast_to(pos, (b, tp, 2)))
    h = T.concat(list(views) + [enc], axis=-1)
    h = linear(h, params[f"{prefix}.lin1.weight"])
    h = T.batch_norm(h, bn_state, training, params[f"{prefix}.bn.weight"], params[f"{prefix}.bn.bias"])
    h = T.relu(h)
    h = T.dropout(h, dropout, training, rng)
    return linear(h, params[f"{prefix}.lin2.weight"], params[f"{prefix}.lin2.bias"])


def multi_resolution_fuse(
    fused: Sequence[Tensor],
    maps: Sequence[tuple],
    last_observed,
) -> Tensor:
    """Sum of per-resolution channel maps, shifted back to level space.

    ``maps[i]`` is a (weight, bias) pair acting on channels; ``last_observed``
    is (B, 1, C) and is broadcast over the horizon.
    """
    if not fused or len(fused) != len(maps):
        raise ShapeError("need one channel map per resolution output")
    total = None
    for h, (w, bias) in zip(fused, maps):
        term = linear(h, w, bias)
        total = term if total is None else T.add(total, term)
    return T.add(total, T.as_tensor(last_observed))
