"""Full forecaster: recent-segment branches per resolution, fusion and gating.

Shapes follow (batch, time, channel).  A model owns its parameter registry
(``model.params``, insertion-ordered, names unique) plus batch-norm running
statistics, which are state but not parameters.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .bands import SpectralMasks, masks_from_beta, normalize_boundaries
from .errors import ConfigError, ShapeError
from .experts import (FourierFeatures, WaveletFeatures, fourier_branch, fourier_features,
                      fourier_shares, wavelet_branch, wavelet_features, wavelet_shares)
from .fusion import (first_diff, linear, multi_resolution_fuse, multi_view_fuse,
                     positional_embedding, segment_recent, smooth_conv)
from .integration import (historical_projection, loss_cons, loss_div, loss_pred, loss_total,
                          temporal_gate, wavelet_profile)
from .spectral import ScaleGrid, WaveletSpec
from .tensor import BatchNormState, Tensor


@dataclass(frozen=True)
class AblationFlags:
    no_wavelet_view: bool = False
    no_fourier_view: bool = False
    no_reg_losses: bool = False
    single_resolution: bool = False
    uniform_splitter: bool = False
    no_alignment: bool = False
    mlp_only: bool = False

    def validate(self) -> "AblationFlags":
        if self.no_wavelet_view and self.no_fourier_view and not self.mlp_only:
            raise ConfigError("cannot drop both spectral views; use mlp_only")
        if self.mlp_only and (self.uniform_splitter or self.no_alignment):
            raise ConfigError("mlp_only has no band splitter to modify")
        if self.no_alignment and self.uniform_splitter:
            raise ConfigError("no_alignment and uniform_splitter are contradictory")
        return self


VARIANTS: Dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "w/o-WaveletView": AblationFlags(no_wavelet_view=True),
    "w/o-FourierView": AblationFlags(no_fourier_view=True),
    "w/o-DivCons": AblationFlags(no_reg_losses=True),
    "w/o-Multi-Res": AblationFlags(single_resolution=True),
    "w/o-CSS": AblationFlags(uniform_splitter=True),
    "w/o-Alignment": AblationFlags(no_alignment=True),
    "w/o-DualView": AblationFlags(mlp_only=True),
}


@dataclass(frozen=True)
class ModelConfig:
    t_in: int = 360
    t_pred: int = 72
    t_recent: int = 120
    channels: int = 1
    experts: int = 3
    resolutions: Tuple[int, ...] = (1, 12, 24)
    hidden: int = 64
    routing_hidden: int = 16
    wavelet_hidden: int = 8
    scales: int = 16
    dropout: float = 0.1
    lambda_div: float = 0.05
    mu_cons: float = 0.05
    wavelet_order: int = 7
    soft_shares: bool = True
    reg_all_resolutions: bool = False
    flags: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> "ModelConfig":
        ints = dict(t_in=self.t_in, t_pred=self.t_pred, t_recent=self.t_recent, channels=self.channels,
                    experts=self.experts, hidden=self.hidden, routing_hidden=self.routing_hidden,
                    wavelet_hidden=self.wavelet_hidden, scales=self.scales)
        for k, v in ints.items():
            if int(v) != v or v < 1:
                raise ConfigError(f"{k} must be a positive integer, got {v}")
        if self.t_recent > self.t_in:
            raise ConfigError(f"t_recent={self.t_recent} exceeds t_in={self.t_in}")
        if self.t_recent < 4:
            raise ConfigError("t_recent must be at least 4")
        k = tuple(self.resolutions)
        if not k or k[0] != 1 or any(b <= a for a, b in zip(k, k[1:])):
            raise ConfigError(f"resolutions must start at 1 and increase strictly, got {k}")
        if k[-1] > self.t_recent:
            raise ConfigError(f"smoothing width {k[-1]} exceeds t_recent={self.t_recent}")
        n = self.t_recent - 1
        if n // 2 + 1 < self.experts or self.scales < self.experts:
            raise ConfigError(f"{self.experts} experts do not fit the spectral resolution")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lambda_div < 0 or self.mu_cons < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 1 <= self.wavelet_order <= 8:
            raise ConfigError(f"wavelet order must lie in [1, 8], got {self.wavelet_order}")
        self.flags.validate()
        return self

    @property
    def active_resolutions(self) -> Tuple[int, ...]:
        return (1,) if self.flags.single_resolution else tuple(self.resolutions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "flags" in d and isinstance(d["flags"], dict):
            d["flags"] = AblationFlags(**d["flags"])
        if "resolutions" in d:
            d["resolutions"] = tuple(int(v) for v in d["resolutions"])
        return cls(**d).validate()


def tiny_config(**overrides) -> ModelConfig:
    """A small configuration for tests and gradient checks."""
    base = dict(t_in=24, t_pred=4, t_recent=12, channels=1, experts=2, resolutions=(1, 3),
                hidden=6, routing_hidden=4, wavelet_hidden=2, scales=6, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base).validate()


@dataclass
class ResolutionFeatures:
    fourier: FourierFeatures
    wavelet: WaveletFeatures

    def take(self, idx) -> "ResolutionFeatures":
        return ResolutionFeatures(FourierFeatures(self.fourier.spectrum[idx], self.fourier.n),
                                  WaveletFeatures(self.wavelet.power[idx], self.wavelet.grid))


@dataclass
class BatchFeatures:
    """Parameter-free transforms of a batch of input windows."""

    inputs: np.ndarray  # (B, T_in, C)
    diffs: List[np.ndarray]  # per resolution (B, N, C)
    per_resolution: List[Optional[ResolutionFeatures]]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "BatchFeatures":
        return BatchFeatures(self.inputs[idx], [d[idx] for d in self.diffs],
                             [None if r is None else r.take(idx) for r in self.per_resolution])


@dataclass
class ForwardTrace:
    beta: np.ndarray
    masks: SpectralMasks
    fourier: list  # per resolution BranchTrace or None
    wavelet: list


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class M2FMoE:
    """The forecaster.  Build with a :class:`ModelConfig` and an integer seed."""

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = (config or ModelConfig()).validate()
        cfg = self.config
        self.spec = WaveletSpec.cgau(cfg.wavelet_order)
        self.n = cfg.t_recent - 1
        self.n_bins = self.n // 2 + 1
        self.grid = ScaleGrid.for_length(self.spec, self.n, cfg.scales)
        self.pos = positional_embedding(cfg.t_pred)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: Dict[str, BatchNormState] = {}
        self.fixed_logits = np.zeros(cfg.experts)
        self.last_trace: Optional[ForwardTrace] = None
        self._build(np.random.Generator(np.random.Philox(seed)))

    # ------------------------------------------------------------ registry

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _linear(self, rng, name: str, n_out: int, n_in: int, bias: bool = True) -> None:
        self._add(f"{name}.weight", _uniform(rng, (n_out, n_in), n_in))
        if bias:
            self._add(f"{name}.bias", _uniform(rng, (n_out,), n_in))

    def _build(self, rng) -> None:
        cfg = self.config
        c, e, tp = cfg.channels, cfg.experts, cfg.t_pred
        fl = cfg.flags
        extra = e if cfg.soft_shares else 0
        if fl.mlp_only:
            self._build_mlp(rng)
        else:
            if not fl.uniform_splitter:
                self._add("bands.logits", np.zeros(e))
                if fl.no_alignment:
                    self._add("bands.wavelet_logits", np.zeros(e))
            n_views = (0 if fl.no_fourier_view else 1) + (0 if fl.no_wavelet_view else 1)
            for i, _k in enumerate(cfg.active_resolutions):
                p = f"res{i}"
                if not fl.no_fourier_view:
                    self._linear(rng, f"{p}.fourier.route1", cfg.routing_hidden, self.n_bins + extra)
                    self._linear(rng, f"{p}.fourier.route2", e, cfg.routing_hidden)
                    self._add(f"{p}.fourier.proj.weight", _uniform(rng, (tp, self.n), self.n))
                    self._add(f"{p}.fourier.proj.bias", _uniform(rng, (tp, 1), self.n))
                if not fl.no_wavelet_view:
                    hw = cfg.wavelet_hidden * c
                    for j in range(e):
                        q = f"{p}.wavelet.expert{j}"
                        self._add(f"{q}.conv1.weight", _uniform(rng, (hw, c, 3, 3), 9 * c))
                        self._add(f"{q}.conv1.bias", _uniform(rng, (hw,), 9 * c))
                        self._add(f"{q}.conv2.weight", _uniform(rng, (c, hw, 3, 3), 9 * hw))
                        self._add(f"{q}.conv2.bias", _uniform(rng, (c,), 9 * hw))
                    self._linear(rng, f"{p}.wavelet.route1", cfg.routing_hidden, cfg.scales * self.n + extra)
                    self._linear(rng, f"{p}.wavelet.route2", e, cfg.routing_hidden)
                    self._linear(rng, f"{p}.wavelet.out2", tp, self.n)
                    self._linear(rng, f"{p}.wavelet.out1", c, c * cfg.scales)
                self._linear(rng, f"{p}.fuse.lin1", cfg.hidden, n_views * c + 2, bias=False)
                self._add(f"{p}.fuse.bn.weight", np.ones(cfg.hidden))
                self._add(f"{p}.fuse.bn.bias", np.zeros(cfg.hidden))
                self._linear(rng, f"{p}.fuse.lin2", c, cfg.hidden)
                self._linear(rng, f"{p}.mix", c, c)
                self.bn[f"{p}.fuse.bn"] = BatchNormState.create(cfg.hidden)
        self._add("gate.history.weight", _uniform(rng, (cfg.t_in, tp), cfg.t_in))
        self._linear(rng, "gate.linear", c, 2 * c)

    def _build_mlp(self, rng) -> None:
        """Plain MLP on the differenced segment, sized to the full model's budget."""
        cfg = self.config
        full = M2FMoE(replace(cfg, flags=AblationFlags()), seed=0)
        budget = full.count_parameters() - cfg.t_in * cfg.t_pred - (2 * cfg.channels + 1) * cfg.channels
        width = max(1, (budget - cfg.t_pred) // (self.n + 1 + cfg.t_pred))
        self._linear(rng, "mlp.lin1", width, self.n)
        self._linear(rng, "mlp.lin2", cfg.t_pred, width)

    def count_parameters(self) -> int:
        return count_parameters(self.params)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    # ----------------------------------------------------------- splitter

    def beta(self) -> Tensor:
        if self.config.flags.uniform_splitter:
            return normalize_boundaries(self.fixed_logits)
        return normalize_boundaries(self.params["bands.logits"])

    def wavelet_beta(self) -> Tensor:
        if self.config.flags.no_alignment:
            return normalize_boundaries(self.params["bands.wavelet_logits"])
        return self.beta()

    def masks(self) -> SpectralMasks:
        wb = self.wavelet_beta().data if self.config.flags.no_alignment else None
        return masks_from_beta(self.beta().data, self.n_bins, self.grid, self.spec, wavelet_beta=wb)

    # ------------------------------------------------------------ forward

    def features(self, x) -> BatchFeatures:
        """Everything about a batch that does not depend on parameters."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (cfg.t_in, cfg.channels):
            raise ShapeError(f"expected input (B, {cfg.t_in}, {cfg.channels}), got {x.shape}")
        recent = segment_recent(x, cfg.t_recent)
        diffs, feats = [], []
        ks = (1,) if cfg.flags.mlp_only else cfg.active_resolutions
        for k in ks:
            dx = first_diff(smooth_conv(recent, k))
            diffs.append(dx)
            if cfg.flags.mlp_only:
                feats.append(None)
                continue
            ff = fourier_features(dx)
            wf = (wavelet_features(dx, self.grid, self.spec) if not cfg.flags.no_wavelet_view
                  else WaveletFeatures(np.zeros((x.shape[0], cfg.channels, 0, 0)), self.grid))
            feats.append(ResolutionFeatures(ff, wf))
        return BatchFeatures(x, diffs, feats)

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None,
                features: Optional[BatchFeatures] = None):
        """Forecast (B, T_p, C) for inputs (B, T_in, C); returns ``(forecast, trace)``.

        A 2-D input (T_in, C) gives a 2-D forecast.
        """
        squeeze = np.ndim(x) == 2 if features is None else False
        feats = features if features is not None else self.features(x)
        cfg = self.config
        fl = cfg.flags
        last = feats.inputs[:, -1:, :]
        if fl.mlp_only:
            recent, trace = self._mlp_forward(feats, training, rng), None
        else:
            recent, trace = self._moe_forward(feats, training, rng)
        hist = historical_projection(feats.inputs, self.params["gate.history.weight"])
        if fl.mlp_only:
            recent = T.add(recent, last)
        out = temporal_gate(recent, hist, self.params["gate.linear.weight"], self.params["gate.linear.bias"])
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        self.last_trace = trace
        return out, trace

    __call__ = forward

    def _mlp_forward(self, feats: BatchFeatures, training, rng) -> Tensor:
        dx = np.swapaxes(feats.diffs[0], 1, 2)  # B,C,N
        h = T.relu(linear(dx, self.params["mlp.lin1.weight"], self.params["mlp.lin1.bias"]))
        h = T.dropout(h, self.config.dropout, training, rng)
        h = linear(h, self.params["mlp.lin2.weight"], self.params["mlp.lin2.bias"])
        return T.swapaxes(h, 1, 2)

    def _moe_forward(self, feats: BatchFeatures, training, rng):
        cfg = self.config
        fl = cfg.flags
        p = self.params
        beta, wbeta = self.beta(), self.wavelet_beta()
        masks = self.masks()
        fused, maps, f_traces, w_traces = [], [], [], []
        for i, rf in enumerate(feats.per_resolution):
            views = []
            ft = wt = None
            if not fl.no_fourier_view:
                shares = fourier_shares(rf.fourier, beta) if cfg.soft_shares else None
                v, ft = fourier_branch(rf.fourier, masks, p, f"res{i}.fourier", shares)
                views.append(v)
            if not fl.no_wavelet_view:
                shares = wavelet_shares(rf.wavelet, wbeta, self.spec) if cfg.soft_shares else None
                v, wt = wavelet_branch(rf.wavelet, masks, p, f"res{i}.wavelet", training,
                                       cfg.dropout, rng, shares)
                views.append(v)
            f_traces.append(ft)
            w_traces.append(wt)
            fused.append(multi_view_fuse(views, self.pos, p, f"res{i}.fuse", self.bn[f"res{i}.fuse.bn"],
                                         training, cfg.dropout, rng))
            maps.append((p[f"res{i}.mix.weight"], p[f"res{i}.mix.bias"]))
        recent = multi_resolution_fuse(fused, maps, feats.inputs[:, -1:, :])
        return recent, ForwardTrace(beta.data.copy(), masks, f_traces, w_traces)

    # --------------------------------------------------------------- loss

    def regularizers(self, trace: Optional[ForwardTrace]) -> Tuple[Tensor, Tensor]:
        zero = Tensor(np.array(0.0))
        cfg = self.config
        if trace is None or cfg.flags.no_reg_losses:
            return zero, zero
        idx = range(len(trace.fourier)) if cfg.reg_all_resolutions else [0]
        divs, conss = [], []
        for i in idx:
            ft, wt = trace.fourier[i], trace.wavelet[i]
            d = [loss_div(br.experts) for br in (ft, wt) if br is not None]
            divs.append(T.scale(T.reduce("sum", T.stack(d)), 1.0 / len(d)))
            if ft is not None and wt is not None:
                n = ft.experts[0].shape[1]
                conss.append(loss_cons(ft.experts, [wavelet_profile(z, n) for z in wt.experts]))
        div = T.scale(T.reduce("sum", T.stack(divs)), 1.0 / len(divs))
        cons = T.scale(T.reduce("sum", T.stack(conss)), 1.0 / len(conss)) if conss else zero
        return div, cons

    def loss_weights(self) -> Tuple[float, float]:
        if self.config.flags.no_reg_losses or self.config.flags.mlp_only:
            return 0.0, 0.0
        return self.config.lambda_div, self.config.mu_cons

    def loss(self, x, y, training: bool = True, rng=None, features: Optional[BatchFeatures] = None):
        """Total objective and its parts ``{"pred", "div", "cons"}`` as floats."""
        pred, trace = self.forward(x, training, rng, features)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 2 and pred.ndim == 3:
            y = y[None]
        lp = loss_pred(pred, y)
        lam, mu = self.loss_weights()
        if lam or mu:
            div, cons = self.regularizers(trace)
        else:
            div = cons = Tensor(np.array(0.0))
        total = loss_total(lp, div, cons, (lam, mu))
        return total, {"pred": lp.item(), "div": div.item(), "cons": cons.item()}

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            return self.forward(x)[0].numpy()
        out = [self.forward(x[i:i + batch_size])[0].numpy() for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.t_pred, self.config.channels))

    # -------------------------------------------------------------- state

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by batch-norm running statistics."""
        out = OrderedDict((k, v.data.copy()) for k, v in self.params.items())
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean.copy()
            out[f"{k}.running_var"] = s.running_var.copy()
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        unknown = set(state) - expected
        if missing or unknown:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}")
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ShapeError(f"{k}: stored shape {state[k].shape} != {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)
        for k, s in self.bn.items():
            s.running_mean = np.array(state[f"{k}.running_mean"], dtype=np.float64)
            s.running_var = np.array(state[f"{k}.running_var"], dtype=np.float64)


def count_parameters(params) -> int:
    return int(sum(np.asarray(getattr(v, "data", v)).size for v in dict(params).values()))


def build_model(config: ModelConfig, seed: int = 0) -> M2FMoE:
    return M2FMoE(config, seed)
