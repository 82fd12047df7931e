"""Optimization, evaluation, baselines and checkpoint files."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import NormStats, SeriesDataset
from .errors import ConfigError, IngestionError, NumericError
from .model import VARIANTS, AblationFlags, BatchFeatures, M2FMoE, ModelConfig, ResolutionFeatures

log = logging.getLogger(__name__)

MAGIC = b"M2FM"
CHECKPOINT_VERSION = 1
NORM_PREFIX = "__norm__."


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Dict[str, T.Tensor], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name].data = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        f = max_norm / total
        for g in grads.values():
            g *= f
    return total


# --------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 48
    max_epochs: int = 100
    patience: int = 10
    clip_norm: float = 5.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not self.lr > 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError(f"invalid training config {self}")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be non-negative")
        return self


@dataclass
class TrainResult:
    history: List[Tuple[int, float, float]]
    best_epoch: int
    best_val: float
    steps: int
    seconds: float


def concat_features(parts: List[BatchFeatures]) -> BatchFeatures:
    if len(parts) == 1:
        return parts[0]
    res = []
    for i, r in enumerate(parts[0].per_resolution):
        if r is None:
            res.append(None)
            continue
        f = [p.per_resolution[i] for p in parts]
        res.append(ResolutionFeatures(
            replace(r.fourier, spectrum=np.concatenate([q.fourier.spectrum for q in f])),
            replace(r.wavelet, power=np.concatenate([q.wavelet.power for q in f]))))
    return BatchFeatures(np.concatenate([p.inputs for p in parts]),
                         [np.concatenate([p.diffs[i] for p in parts]) for i in range(len(parts[0].diffs))],
                         res)


def compute_features(model: M2FMoE, inputs: np.ndarray, chunk: int = 256) -> BatchFeatures:
    return concat_features([model.features(inputs[i:i + chunk]) for i in range(0, len(inputs), chunk)])


def validation_loss(model: M2FMoE, feats: BatchFeatures, targets: np.ndarray, chunk: int = 256) -> float:
    """Forecast MSE in normalized units, eval mode."""
    se, n = 0.0, 0
    for i in range(0, len(feats), chunk):
        idx = np.arange(i, min(i + chunk, len(feats)))
        pred = model.forward(None, False, None, feats.take(idx))[0].data
        se += float(((pred - targets[idx]) ** 2).sum())
        n += pred.size
    return se / n


def train(model: M2FMoE, train_set: SeriesDataset, val_set: SeriesDataset,
          config: Optional[TrainConfig] = None,
          on_step: Optional[Callable[[int, M2FMoE, object], None]] = None) -> TrainResult:
    """Mini-batch Adam with early stopping on validation MSE.

    The parameters (and batch-norm statistics) of the best validation epoch
    are restored before returning.  ``on_step(step, model, trace)`` sees the
    forward trace of every training step.
    """
    cfg = (config or TrainConfig()).validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    start = time.perf_counter()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    tr_feats = compute_features(model, train_set.inputs)
    va_feats = compute_features(model, val_set.inputs)
    params = model.params
    state = AdamState()
    best_val, best_epoch, best_state = np.inf, 0, model.state_dict()
    history = []
    bad_epochs = 0
    steps = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[lo:lo + cfg.batch_size])
            for p in params.values():
                p.zero_grad()
            with T.Tape() as tape:
                loss, parts = model.loss(None, train_set.targets[idx], True, rng, tr_feats.take(idx))
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            T.backward(tape, loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state, cfg.lr)
            steps += 1
            if on_step is not None:
                on_step(steps, model, model.last_trace)
            total += float(loss.data) * len(idx)
            count += len(idx)
        train_loss = total / count
        val = validation_loss(model, va_feats, val_set.targets)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_loss, val))
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, model.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    model.load_state_dict(best_state)
    for p in params.values():
        p.zero_grad()
    return TrainResult(history, best_epoch, float(best_val), steps, time.perf_counter() - start)


# ---------------------------------------------------------------- metrics


def rmse(pred, true) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(true, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def mape(pred, true, eps: float = 1.0) -> float:
    true = np.asarray(true, dtype=np.float64)
    return float(np.mean(np.abs(true - np.asarray(pred, dtype=np.float64)) / (true + eps)))


def metrics(pred, true) -> Dict[str, float]:
    return {"rmse": rmse(pred, true), "mape": mape(pred, true)}


def forecast(model: M2FMoE, dataset: SeriesDataset) -> np.ndarray:
    """Normalized-space forecasts for every window."""
    return model.predict(dataset.inputs)


def evaluate(model: M2FMoE, dataset: SeriesDataset, norm: Optional[NormStats] = None) -> Dict[str, float]:
    """RMSE and MAPE in original units."""
    norm = norm or dataset.norm
    pred = forecast(model, dataset)
    if norm is None:
        return metrics(pred, dataset.targets)
    return metrics(norm.invert(pred), norm.invert(dataset.targets))


def persistence_forecast(inputs: np.ndarray, t_p: int) -> np.ndarray:
    return np.repeat(np.asarray(inputs)[:, -1:, :], t_p, axis=1)


@dataclass
class LinearBaseline:
    """Ordinary least squares from the full input window to the horizon, per channel."""

    weight: np.ndarray  # (T_in + 1, T_p), last row is the intercept

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray) -> "LinearBaseline":
        x = np.swapaxes(inputs, 1, 2).reshape(-1, inputs.shape[1])
        y = np.swapaxes(targets, 1, 2).reshape(-1, targets.shape[1])
        x = np.hstack([x, np.ones((len(x), 1))])
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        return cls(w)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        b, t, c = inputs.shape
        x = np.swapaxes(inputs, 1, 2).reshape(-1, t)
        y = np.hstack([x, np.ones((len(x), 1))]) @ self.weight
        return np.swapaxes(y.reshape(b, c, -1), 1, 2)


# ---------------------------------------------------------------- variants


def variant_flags(name: str) -> AblationFlags:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
    return VARIANTS[name]


def build_variant(flags, base: Optional[ModelConfig] = None) -> ModelConfig:
    """Config for an ablation, given flags or a variant name."""
    if isinstance(flags, str):
        flags = variant_flags(flags)
    base = base or ModelConfig()
    return replace(base, flags=flags.validate()).validate()


# -------------------------------------------------------------- file I/O


def write_checkpoint(path, arrays: Dict[str, np.ndarray]) -> None:
    """Flat little-endian binary: magic, version, then named f64 arrays."""
    buf = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.append(struct.pack("<I", len(raw)))
        buf.append(raw)
        buf.append(struct.pack("<I", a.ndim))
        buf.append(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.append(np.ascontiguousarray(a).tobytes())
    Path(path).write_bytes(b"".join(buf))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise IngestionError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IngestionError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return out


def save_model(path, model: M2FMoE, norm: Optional[NormStats] = None) -> None:
    """Checkpoint plus a JSON sidecar (``<path>.json``) holding the model config."""
    arrays = dict(model.state_dict())
    if norm is not None:
        arrays[NORM_PREFIX + "mean"] = norm.mean
        arrays[NORM_PREFIX + "std"] = norm.std
    write_checkpoint(path, arrays)
    Path(str(path) + ".json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True))


def load_model(path) -> Tuple[M2FMoE, Optional[NormStats]]:
    side = Path(str(path) + ".json")
    if not side.is_file():
        raise ConfigError(f"missing config sidecar {side}")
    config = ModelConfig.from_dict(json.loads(side.read_text()))
    arrays = read_checkpoint(path)
    norm = None
    if NORM_PREFIX + "mean" in arrays:
        norm = NormStats(arrays.pop(NORM_PREFIX + "mean"), arrays.pop(NORM_PREFIX + "std"))
    model = M2FMoE(config)
    model.load_state_dict(arrays)
    return model, norm


def write_history(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tr, va in history:
            w.writerow([e, repr(float(tr)), repr(float(va))])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def routing_rows(model: M2FMoE, dataset: SeriesDataset, chunk: int = 256):
    """(window_index, view, expert_index, weight) for the finest resolution."""
    rows = []
    for lo in range(0, len(dataset), chunk):
        _, trace = model.forward(dataset.inputs[lo:lo + chunk])
        if trace is None:
            continue
        for view, br in (("fourier", trace.fourier[0]), ("wavelet", trace.wavelet[0])):
            if br is None:
                continue
            w = br.weights.data
            for i in range(w.shape[0]):
                for e in range(w.shape[1]):
                    rows.append((lo + i, view, e, float(w[i, e])))
    rows.sort(key=lambda r: (r[0], r[1] != "fourier", r[2]))
    return rows


def write_routing(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_index", "view", "expert_index", "weight"])
        for i, view, e, wt in rows:
            w.writerow([i, view, e, repr(wt)])
