import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kloc import tensor as T
from kloc.tensor import Tape, Tensor, backward

from reference import gelu_scalar, logsumexp, matmul_loops


def grad_of(fn, *values):
    """Gradient of scalar fn(*tensors) w.r.t. each input."""
    xs = [Tensor(v, requires_grad=True) for v in values]
    with Tape() as tape:
        out = fn(*xs)
    g = backward(out, tape)
    return [g[x] for x in xs]


def fd(f64, x, h=1e-3):
    """Central differences of a float64 scalar function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (f64(xp) - f64(xm)) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-2))


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    m = np.arange(9, dtype=np.float32).reshape(3, 3)
    out = T.matmul(np.eye(3), m)
    assert np.array_equal(out.data, m)


def test_matmul_hand_case():
    out = T.matmul([[1, 2], [3, 4]], [[0], [1]])
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)).astype(np.float32), rng.normal(size=(7, 3)).astype(np.float32)
    expected = matmul_loops(a.tolist(), b.tolist())
    got = T.matmul(a, b).data
    assert np.max(np.abs(got - expected) / np.abs(expected)) < 1e-6 or np.allclose(got, expected, rtol=1e-6, atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradients():
    rng = np.random.default_rng(1)
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    ga, gb = grad_of(lambda x, y: T.tsum(T.mul(T.matmul(x, y), w)), a, b)
    assert rel_err(ga, fd(lambda x: float(((x @ b) * w).sum()), a)) < 1e-3
    assert rel_err(gb, fd(lambda y: float(((a @ y) * w).sum()), b)) < 1e-3


def test_batched_matmul_with_shared_weight_gradient():
    rng = np.random.default_rng(2)
    x, w, c = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(2, 3, 5))
    gx, gw = grad_of(lambda a, b: T.tsum(T.mul(T.matmul(a, b), c)), x, w)
    assert rel_err(gw, fd(lambda b: float(((x @ b) * c).sum()), w)) < 1e-3
    assert rel_err(gx, fd(lambda a: float(((a @ w) * c).sum()), x)) < 1e-3


# ---------------------------------------------------------------- elementwise


def test_softmax_uniform_row():
    out = T.softmax_rows(np.zeros((1, 3))).data
    assert np.allclose(out, 1 / 3, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (4, 6), elements=st.floats(-20, 20, width=32)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(x).data
    assert np.all(np.abs(out.sum(axis=1) - 1) < 1e-5)
    assert (out >= 0).all()


def test_layernorm_constant_row_is_zero():
    out = T.layernorm(np.full((2, 5), 3.0), np.ones(5), np.zeros(5)).data
    assert np.array_equal(out, np.zeros((2, 5), dtype=np.float32))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (3, 16), elements=st.floats(-50, 50, width=32)))
def test_layernorm_row_moments(x):
    x = x + np.linspace(0, 1, 16, dtype=np.float32)  # keep rows non-constant
    out = T.layernorm(x, np.ones(16), np.zeros(16)).data.astype(np.float64)
    assert np.all(np.abs(out.mean(axis=1)) < 1e-5)
    var = out.var(axis=1)
    expected = x.astype(np.float64).var(axis=1) / (x.astype(np.float64).var(axis=1) + 1e-5)
    assert np.all(np.abs(var - expected) < 1e-4)


@pytest.mark.parametrize("x", [-3.0, 0.0, 3.0])
def test_gelu_matches_scalar_reference(x):
    assert abs(float(T.gelu(np.array([x])).data[0]) - gelu_scalar(x)) < 1e-5


def test_nonfinite_input_rejected():
    with pytest.raises(T.NumericError):
        T.gelu(np.array([np.nan]))
    with pytest.raises(T.NumericError):
        T.softmax_rows(np.array([[np.inf, 0.0]]))


def test_log_and_neg():
    out = T.neg(T.log(np.array([1.0, math.e]))).data
    assert np.allclose(out, [0.0, -1.0])


PRIMITIVES = {
    "add": (lambda x, w: T.tsum(T.mul(T.add(x, x * 0.5), w)), lambda x, w: ((1.5 * x) * w).sum()),
    "mul": (lambda x, w: T.tsum(T.mul(T.mul(x, x), w)), lambda x, w: (x * x * w).sum()),
    "gelu": (lambda x, w: T.tsum(T.mul(T.gelu(x), w)),
             lambda x, w: sum(gelu_scalar(v) * c for v, c in zip(x.ravel(), w.ravel()))),
    "softmax": (lambda x, w: T.tsum(T.mul(T.softmax_rows(x), w)),
                lambda x, w: (np.exp(x - x.max(1, keepdims=True)) / np.exp(x - x.max(1, keepdims=True)).sum(1, keepdims=True) * w).sum()),
    "layernorm": (lambda x, w: T.tsum(T.mul(T.layernorm(x, np.full(x.shape[-1], 1.3), np.full(x.shape[-1], 0.2)), w)),
                  lambda x, w: (((x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5) * 1.3 + 0.2) * w).sum()),
    "log": (lambda x, w: T.tsum(T.mul(T.log(T.add(T.mul(x, x), 1.0)), w)), lambda x, w: (np.log(x * x + 1) * w).sum()),
    "neg": (lambda x, w: T.tsum(T.mul(T.neg(x), w)), lambda x, w: (-x * w).sum()),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5)).astype(np.float32)
    w = rng.normal(size=(3, 5)).astype(np.float32)
    ours, oracle = PRIMITIVES[name]
    (g,) = grad_of(lambda t: ours(t, w), x)
    expected = fd(lambda v: float(oracle(v, w.astype(np.float64))), x.astype(np.float64))
    assert rel_err(g, expected) < 1e-3


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_saturated():
    logits = np.zeros((2, 4), dtype=np.float32)
    logits[0, 1] = logits[1, 3] = 1e4
    assert float(T.cross_entropy(logits, [1, 3]).data) < 1e-6


def test_cross_entropy_uniform():
    assert abs(float(T.cross_entropy(np.zeros((3, 8)), [0, 5, 7]).data) - math.log(8)) < 1e-6


def test_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(3, 5)).astype(np.float32)
    targets = [4, 0, 2]
    expected = sum(logsumexp(row) - float(row[t]) for row, t in zip(logits, targets)) / 3
    assert abs(float(T.cross_entropy(logits, targets).data) - expected) < 1e-5
    (g,) = grad_of(lambda x: T.cross_entropy(x, targets), logits)
    oracle = fd(lambda x: sum(logsumexp(r) - r[t] for r, t in zip(x, targets)) / 3, logits.astype(np.float64))
    assert rel_err(g, oracle) < 1e-3


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        T.cross_entropy(np.zeros((1, 4)), [4])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (2, 6), elements=st.floats(-30, 30, width=32)), st.integers(0, 5))
def test_cross_entropy_non_negative(x, t):
    assert float(T.cross_entropy(x, [t, 5 - t]).data) >= 0


# ---------------------------------------------------------------- backward


def test_backward_sum_is_ones():
    x = np.random.default_rng(4).normal(size=(2, 3, 4))
    (g,) = grad_of(lambda t: T.tsum(t), x)
    assert np.array_equal(g, np.ones_like(x))


def test_backward_square():
    (g,) = grad_of(lambda t: T.tsum(T.mul(t, t)), np.array(3.0))
    assert float(g) == 6.0


def test_loss_not_on_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    other = T.tsum(x)  # no tape active
    with Tape() as tape:
        T.tsum(T.mul(x, 2.0))
    with pytest.raises(T.GraphError):
        backward(other, tape)


def test_non_participating_gradient_is_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.mul(x, x))
    g = backward(loss, tape)
    assert np.array_equal(g[y], np.zeros((2, 2)))


def test_tape_replays_in_reverse_order():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        a = T.mul(x, 3.0)
        b = T.gelu(a)
        loss = T.tsum(b)
    assert [r.op for r in tape.records] == ["mul", "gelu", "sum"]
    assert tape.records[-1].out is loss


def test_ops_outside_tape_do_not_record():
    x = Tensor(np.ones(2), requires_grad=True)
    out = T.mul(x, 2.0)
    assert not out.requires_grad


# ---------------------------------------------------------------- optimizers


def test_sgd_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    assert np.array_equal(T.sgd_step(p, {"w": np.zeros(2, np.float32)}, 0.1)["w"], p["w"])


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    out = T.adam_step(p, {"w": np.zeros(2, np.float32)}, T.AdamState())
    assert np.array_equal(out["w"], p["w"])


def test_sgd_arithmetic():
    out = T.sgd_step({"p": np.array(1.0, np.float32)}, {"p": np.array(2.0, np.float32)}, 0.1)
    assert abs(float(out["p"]) - 0.8) < 1e-7


def test_adam_converges_on_quadratic():
    params = {"x": np.array(0.0, np.float32)}
    state = T.AdamState(lr=0.2)
    for _ in range(100):
        x = Tensor(params["x"], requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.mul(T.sub(x, 5.0), T.sub(x, 5.0)))
        params = T.adam_step(params, {"x": backward(loss, tape)[x]}, state)
    # each Adam step moves at most ~lr, so lr must be large enough to cover 5 units in 100 steps
    assert abs(float(params["x"]) - 5.0) < 1e-2


def test_nan_gradient_refused():
    state = T.AdamState()
    with pytest.raises(T.NumericError):
        T.adam_step({"w": np.ones(2, np.float32)}, {"w": np.array([np.nan, 0], np.float32)}, state)
    assert state.t == 0


def test_shape_mismatched_gradient():
    with pytest.raises(T.DimensionError):
        T.sgd_step({"w": np.ones(2, np.float32)}, {"w": np.ones(3, np.float32)}, 0.1)
