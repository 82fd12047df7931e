import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from m2fmoe import tensor as T
from m2fmoe.errors import ConfigError, ContractError, NumericError, ShapeError
from m2fmoe.tensor import BatchNormState, Tape, Tensor, backward, grad_check


def _p(rng, *shape, positive=False):
    a = rng.uniform(-2.0, 2.0, size=shape)
    return Tensor(np.abs(a) + 0.5 if positive else a, requires_grad=True)


def test_add_matmul_basic():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(T.matmul(a, b).data, [[3.0], [7.0]])
    assert np.array_equal((a + 1).data, [[2.0, 3.0], [4.0, 5.0]])


def test_backward_simple_product():
    x = Tensor(3.0, requires_grad=True)
    y = Tensor(4.0, requires_grad=True)
    with Tape() as tape:
        z = x * y + x
    backward(tape, z)
    assert x.grad == 5.0 and y.grad == 3.0


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ContractError):
        backward(tape, y)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.reduce("sum", x * x)
    assert y.item() == 3.0
    assert x.grad is None


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with Tape() as tape:
        y = T.reduce("sum", x * x * x)
    backward(tape, y)
    assert np.allclose(x.grad, 3 * x.data ** 2)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((1, 1, 1, 1, 1)))


def test_reduce_errors():
    with pytest.raises(ContractError):
        T.reduce("sum", Tensor(np.ones(3)), axis=2)
    with pytest.raises(ConfigError):
        T.reduce("median", Tensor(np.ones(3)))


def test_softmax_simplex_and_stability():
    y = T.softmax(Tensor([1000.0, 1000.0, -1000.0]))
    assert np.allclose(y.data, [0.5, 0.5, 0.0])
    assert abs(y.data.sum() - 1) < 1e-12


def test_sqrt_gradient_at_zero_is_zero():
    x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    with Tape() as tape:
        y = T.reduce("sum", T.sqrt(x))
    backward(tape, y)
    assert np.allclose(x.grad, [0.0, 0.25])


def test_l2_norm_gradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        y = T.reduce("l2_norm", x)
    backward(tape, y)
    assert np.array_equal(x.grad, np.zeros(3))


def test_conv2d_matches_direct_correlation():
    from scipy.signal import correlate
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 7))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y = T.conv2d(x, k, b, padding="same").data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.array([[sum(correlate(xp[n, c], k[o, c], mode="valid") for c in range(3)) + b[o]
                     for o in range(4)] for n in range(2)])
    assert np.allclose(y, ref, atol=1e-12)


def test_conv1d_valid_length():
    x = Tensor(np.arange(10.0).reshape(1, 10))
    k = Tensor(np.array([[[1.0, -1.0]]]))
    y = T.conv1d(x, k)
    assert y.shape == (1, 9)
    assert np.allclose(y.data, -1.0)


def test_batch_norm_train_and_eval():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(3.0, 2.0, size=(50, 4)))
    state = BatchNormState.create(4)
    y = T.batch_norm(x, state, training=True)
    assert np.allclose(y.data.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(y.data.var(axis=0), 1, atol=1e-3)
    assert not np.allclose(state.running_mean, 0)
    before = state.running_mean.copy()
    T.batch_norm(x, state, training=False)
    assert np.array_equal(before, state.running_mean)


def test_batch_norm_needs_two_rows():
    with pytest.raises(ContractError):
        T.batch_norm(Tensor(np.ones((1, 3))), BatchNormState.create(3), training=True)


def test_dropout_eval_identity_and_scaling():
    x = Tensor(np.ones((1000,)))
    assert T.dropout(x, 0.5, training=False, rng=None) is x
    y = T.dropout(x, 0.5, training=True, rng=np.random.default_rng(0))
    assert set(np.unique(y.data)) <= {0.0, 2.0}
    with pytest.raises(ConfigError):
        T.dropout(x, 1.0, training=True, rng=np.random.default_rng(0))


def test_grad_check_detects_wrong_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def bad(g):
        return (2 * g,)

    def f():
        y = T._result("bad_square", x.data ** 2, (x,), bad)
        return T.reduce("sum", y)

    report = grad_check(f, {"x": x})
    assert not report.ok


def test_grad_check_rejects_nonfinite():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NumericError), np.errstate(divide="ignore"):
        grad_check(lambda: T.reduce("sum", T.log(x)), {"x": x})


# ------------------------------------------------ per-op finite differences

def _op_cases(rng):
    """Scalar losses exercising every differentiable op."""
    a = _p(rng, 3, 4)
    b = _p(rng, 3, 4)
    v = _p(rng, 4)
    m = _p(rng, 2, 4, 5)
    pos = _p(rng, 3, 4, positive=True)
    img = _p(rng, 2, 2, 5, 6)
    ker = _p(rng, 3, 2, 3, 3)
    kb = _p(rng, 3)
    seq = _p(rng, 2, 3, 9)
    k1 = _p(rng, 2, 3, 4)
    bnx = _p(rng, 6, 5)
    gam = _p(rng, 5)
    bet = _p(rng, 5)
    w = Tensor(rng.normal(size=(3, 4)))
    st = BatchNormState.create(5)
    return {
        "add": (lambda: T.reduce("sum", T.mul(T.add(a, v), w)), {"a": a, "v": v}),
        "sub": (lambda: T.reduce("sum", T.mul(T.sub(a, b), w)), {"a": a, "b": b}),
        "mul": (lambda: T.reduce("sum", T.mul(a, b)), {"a": a, "b": b}),
        "div": (lambda: T.reduce("sum", T.div(a, pos)), {"a": a, "pos": pos}),
        "scale": (lambda: T.reduce("sum", T.mul(T.scale(a, -2.5), w)), {"a": a}),
        "relu": (lambda: T.reduce("sum", T.mul(T.relu(a), w)), {"a": a}),
        "sigmoid": (lambda: T.reduce("sum", T.mul(T.sigmoid(a), w)), {"a": a}),
        "exp": (lambda: T.reduce("sum", T.exp(T.scale(a, 0.5))), {"a": a}),
        "log": (lambda: T.reduce("sum", T.mul(T.log(pos), w)), {"pos": pos}),
        "sqrt": (lambda: T.reduce("sum", T.mul(T.sqrt(pos), w)), {"pos": pos}),
        "matmul": (lambda: T.reduce("sum", T.mul(T.matmul(m, T.transpose(m, (0, 2, 1))),
                                                 T.matmul(m, T.transpose(m, (0, 2, 1))))), {"m": m}),
        "matmul_bcast": (lambda: T.reduce("sum", T.matmul(a, T.reshape(v, (4, 1)))), {"a": a, "v": v}),
        "reshape_transpose": (lambda: T.reduce("sum", T.mul(T.transpose(T.reshape(a, (4, 3))), w)), {"a": a}),
        "swapaxes": (lambda: T.reduce("sum", T.mul(T.swapaxes(m, 0, 2), T.swapaxes(m, 0, 2))), {"m": m}),
        "getitem": (lambda: T.reduce("sum", T.mul(a[1:, ::2], a[1:, ::2])), {"a": a}),
        "concat": (lambda: T.reduce("sum", T.mul(T.concat([a, b], axis=0), T.concat([b, a], axis=0))), {"a": a, "b": b}),
        "stack": (lambda: T.reduce("sum", T.mul(T.stack([a, b], axis=1), T.stack([b, b], axis=1))), {"a": a, "b": b}),
        "sum": (lambda: T.reduce("sum", T.mul(T.reduce("sum", m, axis=1), T.reduce("sum", m, axis=1))), {"m": m}),
        "mean": (lambda: T.reduce("sum", T.mul(T.reduce("mean", m, axis=(0, 2), keepdims=True), 3.0)), {"m": m}),
        "l2_norm": (lambda: T.reduce("sum", T.reduce("l2_norm", m, axis=2)), {"m": m}),
        "softmax": (lambda: T.reduce("sum", T.mul(T.softmax(a, axis=1), w)), {"a": a}),
        "conv2d": (lambda: T.reduce("sum", T.mul(T.conv2d(img, ker, kb), T.conv2d(img, ker, kb))),
                   {"img": img, "ker": ker, "kb": kb}),
        "conv1d": (lambda: T.reduce("sum", T.mul(T.conv1d(seq, k1, padding="same"), T.conv1d(seq, k1, padding="same"))),
                   {"seq": seq, "k1": k1}),
        "batch_norm": (lambda: T.reduce("sum", T.mul(T.batch_norm(bnx, st, True, gam, bet),
                                                     Tensor(np.arange(30.0).reshape(6, 5)))),
                       {"bnx": bnx, "gam": gam, "bet": bet}),
    }


@pytest.mark.parametrize("seed", range(3))
def test_every_op_passes_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (f, params) in _op_cases(rng).items():
        report = grad_check(f, params, tolerance=1e-4)
        assert report.ok, (name, report.errors)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_on_simplex(x):
    y = T.softmax(Tensor(x), axis=-1).data
    assert (y >= 0).all()
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
                  elements=st.floats(-10, 10, allow_nan=False)),
       hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
                  elements=st.floats(-10, 10, allow_nan=False)))
def test_add_commutes_and_unbroadcasts(a, b):
    if a.shape != b.shape:
        return
    x, y = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    with Tape() as tape:
        s = T.reduce("sum", T.add(x, y))
    backward(tape, s)
    assert np.array_equal(T.add(x, y).data, T.add(y, x).data)
    assert np.array_equal(x.grad, np.ones_like(a))
