"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations executed inside a ``with Tape() as tape:`` block are recorded
whenever at least one operand requires a gradient.  ``backward(tape, root)``
walks the recording in reverse and accumulates gradients; leaves (tensors
that were not produced on the tape, typically parameters) receive their
gradient in ``.grad``.

Outside a tape nothing is recorded, which is how evaluation runs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

MAX_NDIM = 4
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_NDIM:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_NDIM}: shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    kind: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.  Use one tape per training step.
    """

    nodes: List[_Node] = field(default_factory=list)
    _leaf_ids: Dict[int, int] = field(default_factory=dict)
    _leaves: List[Tensor] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf_id(self, t: Tensor) -> int:
        key = id(t)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = -(len(self._leaves) + 1)
            self._leaves.append(t)
        return self._leaf_ids[key]

    def record(self, kind: str, out: Tensor, inputs: Tuple[Tensor, ...], fn: BackwardFn) -> None:
        for t in inputs:
            if t.requires_grad and not self._owns(t):
                self._leaf_id(t)
        out.requires_grad = True
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(kind, out, inputs, fn))

    def _owns(self, t: Tensor) -> bool:
        nid = t.node_id
        return nid is not None and 0 <= nid < len(self.nodes) and self.nodes[nid].output is t

    def node_key(self, t: Tensor) -> Optional[int]:
        if self._owns(t):
            return t.node_id
        return self._leaf_ids.get(id(t))

    def clear(self) -> None:
        self.nodes.clear()
        self._leaf_ids.clear()
        self._leaves.clear()


def backward(tape: Tape, root: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``root``.

    Returns gradients keyed by node id (leaves carry negative ids) and
    accumulates leaf gradients into ``Tensor.grad``.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {}
    key = tape.node_key(root)
    if key is None:
        return grads
    grads[key] = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        g = grads.get(node.output.node_id)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pkey = tape.node_key(parent)
            if pkey is None:
                continue
            if pkey in grads:
                grads[pkey] = grads[pkey] + pg
            else:
                grads[pkey] = pg
    for leaf in tape._leaves:
        g = grads.get(tape._leaf_ids[id(leaf)])
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return grads


def _result(kind: str, data: np.ndarray, inputs: Tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    q = a.data / b.data
    return _result("div", q, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * q / b.data, b.shape)))


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    f = float(factor)
    return _result("scale", x.data * f, (x,), lambda g: (g * f,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    """Square root whose gradient is taken as 0 at 0 (the subgradient used by norms)."""
    x = as_tensor(x)
    y = np.sqrt(x.data)

    def fn(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g * 0.5 / safe, 0.0),)

    return _result("sqrt", y, (x,), fn)


def elementwise(kind: str, *operands, factor: float = 1.0) -> Tensor:
    """Dispatch by name: add, mul, sub, relu, sigmoid, scale."""
    binary = {"add": add, "mul": mul, "sub": sub}
    unary = {"relu": relu, "sigmoid": sigmoid}
    if kind in binary:
        return binary[kind](*operands)
    if kind in unary:
        return unary[kind](*operands)
    if kind == "scale":
        return scale(operands[0], factor)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


# ------------------------------------------------------------------- algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching rules on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result("matmul", out, (a, b), fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _result("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result("getitem", x.data[index], (x,), fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def fn(g):
        res = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return res

    return _result("concat", out, ts, fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    return _result("stack", out, ts,
                   lambda g: [np.take(g, i, axis=axis) for i in range(len(ts))])


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    if any(not -ndim <= a < ndim for a in axis):
        raise IndexError(axis)
    return tuple(a % ndim for a in axis)


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """sum, mean or l2_norm over ``axis`` (None = all axes)."""
    x = as_tensor(x)
    if x.ndim == 0:
        axes: Tuple[int, ...] = ()
    else:
        try:
            axes = _norm_axis(axis, x.ndim)
        except (TypeError, ZeroDivisionError):
            raise ContractError(f"{kind}: invalid axis {axis!r}") from None
        except IndexError:
            raise ContractError(f"{kind}: axis {axis!r} out of range for shape {x.shape}") from None
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ContractError(f"{kind}: reduction over an empty axis of shape {x.shape}")

    def expand(g):
        if not keepdims and axes:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, x.shape)

    if kind == "sum":
        y = x.data.sum(axis=axes, keepdims=keepdims)
        return _result("sum", y, (x,), lambda g: (np.array(expand(g)),))
    if kind == "mean":
        y = x.data.mean(axis=axes, keepdims=keepdims)
        return _result("mean", y, (x,), lambda g: (expand(g) / count,))
    if kind == "l2_norm":
        y = np.sqrt((x.data ** 2).sum(axis=axes, keepdims=keepdims))

        def fn(g):
            yk = y if keepdims or not axes else np.expand_dims(y, axes)
            safe = np.where(yk > 0, yk, 1.0)
            return (np.where(yk > 0, expand(g) * x.data / safe, 0.0),)

        return _result("l2_norm", y, (x,), fn)
    raise ConfigError(f"unknown reduction {kind!r}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax: invalid axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# --------------------------------------------------------------- convolution


def _same_pad(k: int) -> Tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def _conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], pad_h, pad_w) -> Tensor:
    # Layout trick: padded images are row-flattened and laid end to end in
    # one (C_in, B * block) matrix, so a kernel tap is a shifted contiguous
    # slice.  Positions that straddle row or image ends are junk and get
    # cropped (and carry zero gradient).  Each contraction either stacks the
    # shifted slices into one GEMM (cheap when the stacked side has few
    # channels) or runs one GEMM per tap.
    xd = x.data
    kd = kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or xd.shape[1] != kd.shape[1]:
        raise ShapeError(f"conv: input {x.shape} incompatible with kernel {kernel.shape}")
    b, cin, h, w = xd.shape
    cout, _, kh, kw = kd.shape
    hp, wp = h + sum(pad_h), w + sum(pad_w)
    if hp < kh or wp < kw:
        raise ShapeError(f"conv: kernel {kernel.shape} longer than padded input {(b, cin, hp, wp)}")
    ho, wo = hp - kh + 1, wp - kw + 1
    total = b * hp * wp
    offs = [i * wp + j for i in range(kh) for j in range(kw)]
    ntap = len(offs)
    flat = np.zeros((cin, total + offs[-1]))
    view = flat[:, :total].reshape(cin, b, hp, wp)
    view[:, :, pad_h[0]:pad_h[0] + h, pad_w[0]:pad_w[0] + w] = xd.transpose(1, 0, 2, 3)
    taps = kd.reshape(cout, cin, ntap)
    cols = None
    if cin <= cout:
        cols = np.empty((ntap, cin, total))
        for t, off in enumerate(offs):
            cols[t] = flat[:, off:off + total]
        cols = cols.reshape(ntap * cin, total)
        acc = taps.transpose(0, 2, 1).reshape(cout, ntap * cin) @ cols
    else:
        acc = np.zeros((cout, total))
        for t, off in enumerate(offs):
            acc += taps[:, :, t] @ flat[:, off:off + total]
    out = acc.reshape(cout, b, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def fn(g):
        gx = gk = gb = None
        ge = np.zeros((cout, b, hp, wp))
        ge[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        ge = ge.reshape(cout, total)
        if kernel.requires_grad:
            if cols is not None:
                gk = (ge @ cols.T).reshape(cout, ntap, cin).transpose(0, 2, 1)
            else:
                gk = np.stack([ge @ flat[:, off:off + total].T for off in offs], axis=-1)
            gk = np.ascontiguousarray(gk).reshape(kd.shape)
        if x.requires_grad:
            if cout <= cin:
                shifted = np.zeros((ntap, cout, flat.shape[1]))
                for t, off in enumerate(offs):
                    shifted[t, :, off:off + total] = ge
                gflat = taps.transpose(1, 2, 0).reshape(cin, ntap * cout) @ shifted.reshape(ntap * cout, -1)
            else:
                gflat = np.zeros_like(flat)
                for t, off in enumerate(offs):
                    gflat[:, off:off + total] += taps[:, :, t].T @ ge
            gv = gflat[:, :total].reshape(cin, b, hp, wp)
            gx = gv[:, :, pad_h[0]:pad_h[0] + h, pad_w[0]:pad_w[0] + w].transpose(1, 0, 2, 3)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _result("conv", out, inputs, fn)


def conv2d(x, kernel, bias=None, padding: str = "same") -> Tensor:
    """2-D cross-correlation. ``x`` is (B, C_in, H, W), kernel (C_out, C_in, kh, kw)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    if padding == "same":
        ph, pw = _same_pad(kernel.shape[2]), _same_pad(kernel.shape[3])
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ConfigError(f"unknown padding {padding!r}")
    return _conv2d(x, kernel, bias, ph, pw)


def conv1d(x, kernel, bias=None, padding: str = "valid") -> Tensor:
    """1-D cross-correlation along the last axis.

    ``x`` is (C_in, L) or (B, C_in, L); kernel is (C_out, C_in, k).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim not in (2, 3):
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    batched = x.ndim == 3
    x4 = reshape(x, (x.shape[0] if batched else 1, x.shape[-2], 1, x.shape[-1]))
    k4 = reshape(kernel, (kernel.shape[0], kernel.shape[1], 1, kernel.shape[2]))
    if padding == "same":
        pw = _same_pad(kernel.shape[2])
    elif padding == "valid":
        pw = (0, 0)
    else:
        raise ConfigError(f"unknown padding {padding!r}")
    out = _conv2d(x4, k4, None if bias is None else as_tensor(bias), (0, 0), pw)
    n_out, length = out.shape[1], out.shape[3]
    return reshape(out, (x.shape[0], n_out, length) if batched else (n_out, length))


# ------------------------------------------------------------ normalization


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, features: int) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features))


def batch_norm(x, state: BatchNormState, training: bool, weight=None, bias=None) -> Tensor:
    """Normalize the last axis; statistics pool every other axis.

    Training mode uses batch statistics and updates ``state`` in place;
    eval mode uses the running statistics and leaves them untouched.
    """
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes]))
    if training:
        if n < 2:
            raise ContractError("batch_norm: training mode needs at least 2 rows per feature")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu) * inv

        def fn(g):
            gm = g.mean(axis=axes)
            gxm = (g * xhat).mean(axis=axes)
            return (inv * (g - gm - xhat * gxm),)

        y = _result("batch_norm", xhat, (x,), fn)
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        y = _result("batch_norm", (x.data - state.running_mean) * inv, (x,), lambda g: (g * inv,))
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate) / (1.0 - rate)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -------------------------------------------------------------- grad checks


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float
    # entries left out because the difference stencil straddles a kink (relu, abs, max)
    skipped: Dict[str, int] = field(default_factory=dict)

    @property
    def failed(self) -> List[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    params: Dict[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare tape gradients against central differences.

    ``f`` must rebuild the scalar loss from the current parameter values.
    The relative error of a parameter is
    ``max|analytic - numeric| / (max|analytic| + max|numeric| + floor)``
    over the checked entries, where ``floor`` is the smallest gradient the
    difference quotient can resolve to ``tolerance`` given float64 roundoff
    in the loss (gradients that are exactly zero by symmetry would otherwise
    compare noise against noise).  ``max_entries`` samples that many entries
    per parameter (all entries when None).

    With ``skip_kinks`` an entry that disagrees is re-differenced at a tenth
    of the step; if the two quotients disagree with each other the function
    is not smooth inside the stencil and the entry is skipped and counted in
    ``report.skipped`` instead of failing.
    """
    if not step > 0:
        raise ConfigError(f"grad_check step must be positive, got {step}")
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    backward(tape, loss)
    rng = rng or np.random.default_rng(0)
    floor = 1e-12 + 16 * np.finfo(np.float64).eps * abs(float(loss.data)) / (step * tolerance)

    def value() -> float:
        v = float(f().data)
        if not np.isfinite(v):
            raise NumericError("grad_check: loss is not finite under perturbation")
        return v

    def central(flat, i, h) -> float:
        orig = flat[i]
        flat[i] = orig + h
        up = value()
        flat[i] = orig - h
        down = value()
        flat[i] = orig
        return (up - down) / (2 * h)

    errors, skipped = {}, {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a = analytic.reshape(-1)[idx]
        num = np.array([central(flat, i, step) for i in idx])
        denom = np.abs(a).max() + np.abs(num).max() + floor
        keep = np.ones(len(idx), dtype=bool)
        if skip_kinks:
            for j in np.flatnonzero(np.abs(a - num) >= tolerance * denom):
                fine = central(flat, idx[j], step / 10)
                if abs(fine - num[j]) >= tolerance * denom:
                    keep[j] = False
        if not keep.all():
            skipped[name] = int(np.sum(~keep))
        errors[name] = float(np.abs(a - num)[keep].max(initial=0.0) / denom)
    return GradCheckReport(errors, tolerance, skipped)
