import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stationflow.common import ConfigError
from stationflow import nn
from stationflow.nn import (Adam, MinMaxScaler, Params, Tensor, gradient_check,
                            load_checkpoint, masked_softmax, save_checkpoint, softmax)

from oracles import scalar_adam_ref


def test_linear_loss_gradient_analytic():
    # loss = ||W x - y||^2 at W = 0 has gradient -2 y x^T
    x = np.array([[1.0], [2.0], [3.0]])
    y = np.array([[4.0], [5.0]])
    params = Params()
    W = params.add("W", np.zeros((2, 3)))
    loss = nn.reduce_sum(nn.square(nn.sub(nn.matmul(W, Tensor(x)), Tensor(y))))
    loss.backward()
    assert np.allclose(W.grad, -2.0 * y @ x.T, atol=1e-12)


def test_three_layer_network_finite_differences():
    rng = np.random.default_rng(0)
    params = Params()
    W1 = params.add("W1", rng.normal(0, 0.5, (4, 6)))
    b1 = params.add("b1", rng.normal(0, 0.5, (6,)))
    W2 = params.add("W2", rng.normal(0, 0.5, (6, 5)))
    b2 = params.add("b2", rng.normal(0, 0.5, (5,)))
    W3 = params.add("W3", rng.normal(0, 0.5, (5, 2)))
    x = rng.normal(0, 1.0, (3, 4))
    y = rng.normal(0, 1.0, (3, 2))

    def build_loss():
        h1 = nn.relu(nn.add(nn.matmul(Tensor(x), W1), b1))
        h2 = nn.sigmoid(nn.add(nn.matmul(h1, W2), b2))
        out = nn.matmul(h2, W3)
        return nn.reduce_sum(nn.square(nn.sub(out, Tensor(y))))

    failures = gradient_check(build_loss, params)
    assert failures == []


def test_unused_parameter_gets_zero_gradient():
    params = Params()
    used = params.add("used", np.ones((2, 2)))
    unused = params.add("unused", np.ones((3, 3)))
    loss = nn.reduce_sum(nn.square(used))
    loss.backward()
    assert unused.grad is None  # never touched by the graph


def test_leaky_relu_and_gather_gradients():
    rng = np.random.default_rng(1)
    params = Params()
    E = params.add("E", rng.normal(0, 0.5, (5, 3)))
    W = params.add("W", rng.normal(0, 0.5, (3, 1)))
    idx = np.array([0, 2, 2, 4])

    def build_loss():
        rows = nn.gather_rows(E, idx)
        s = nn.leaky_relu(nn.matmul(rows, W), 0.2)
        return nn.reduce_sum(nn.square(s))

    assert gradient_check(build_loss, params) == []


def test_masked_softmax_rows():
    scores = Tensor(np.array([[1.0, 2.0, 3.0], [5.0, 1.0, 0.0]]))
    mask = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    p = masked_softmax(scores, mask)
    assert p.data[0, 2] == 0.0
    assert p.data[0, :2].sum() == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(p.data[1], np.zeros(3))


def test_masked_softmax_gradient():
    rng = np.random.default_rng(5)
    params = Params()
    S = params.add("S", rng.normal(0, 1.0, (3, 4)))
    mask = np.array([[1, 1, 1, 0], [1, 0, 1, 1], [1, 1, 1, 1]], dtype=float)
    target = rng.normal(0, 1.0, (3, 4))

    def build_loss():
        return nn.reduce_sum(nn.square(nn.sub(masked_softmax(S, mask), Tensor(target))))

    assert gradient_check(build_loss, params) == []


def test_adam_first_step_is_signed_lr():
    params = Params()
    w = params.add("w", np.array([1.0, -2.0]))
    opt = Adam(params, lr=0.01)
    w.grad = np.array([3.0, -0.5])
    opt.step()
    assert np.allclose(w.data, np.array([1.0 - 0.01, -2.0 + 0.01]), atol=1e-9)


def test_adam_zero_gradient_no_move():
    params = Params()
    w = params.add("w", np.array([1.5]))
    opt = Adam(params, lr=0.01, weight_decay=0.0)
    w.grad = np.zeros(1)
    opt.step()
    assert w.data[0] == 1.5


def test_adam_matches_scalar_reference():
    # quadratic loss (w - 3)^2, gradient 2 (w - 3)
    params = Params()
    w = params.add("w", np.array([0.0]))
    opt = Adam(params, lr=0.05, weight_decay=1e-3)
    ours = []
    for _ in range(10):
        params.zero_grad()
        w.grad = 2.0 * (w.data - 3.0)
        opt.step()
        ours.append(float(w.data[0]))
    ref = scalar_adam_ref(lambda v: 2.0 * (v - 3.0), 0.0, 10, lr=0.05,
                          weight_decay=1e-3)
    assert np.allclose(ours, ref, atol=1e-9)


def test_softmax_analytic_cases():
    assert np.allclose(softmax([0.0, 0.0, 0.0]), np.full(3, 1 / 3), atol=1e-15)
    assert np.allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-12)
    big = softmax([1000.0, 0.0])
    assert np.isfinite(big).all()
    assert big[0] == pytest.approx(1.0, abs=1e-12)


def test_softmax_empty_fatal():
    with pytest.raises(ConfigError):
        softmax([])


@given(arrays(np.float64, st.integers(1, 8),
              elements=st.floats(-50, 50)))
@settings(max_examples=100, deadline=None)
def test_softmax_simplex(values):
    p = softmax(values)
    assert (p > 0).all()
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_scaler_basic_and_constant_column():
    X = np.array([[2.0, 5.0], [4.0, 5.0]])
    scaler = MinMaxScaler.fit(X)
    out = scaler.transform(X)
    assert np.array_equal(out[:, 0], [0.0, 1.0])
    assert np.array_equal(out[:, 1], [0.0, 0.0])
    assert scaler.constant.tolist() == [False, True]


def test_scaler_no_clipping_outside_train_range():
    scaler = MinMaxScaler.fit(np.array([[0.0], [10.0]]))
    assert scaler.transform(np.array([[20.0]]))[0, 0] == 2.0
    assert scaler.transform(np.array([[-10.0]]))[0, 0] == -1.0


@given(arrays(np.float64, (7, 4), elements=st.floats(-1e6, 1e6)))
@settings(max_examples=50, deadline=None)
def test_scaler_roundtrip(X):
    scaler = MinMaxScaler.fit(X)
    back = scaler.inverse_transform(scaler.transform(X))
    span = np.abs(X).max() + 1.0
    assert np.allclose(back, X, atol=1e-12 * span)


def test_scaler_empty_fatal():
    with pytest.raises(ConfigError):
        MinMaxScaler.fit(np.zeros((0, 3)))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(33)
    state = {"a.weight": rng.normal(size=(4, 3)),
             "a.bias": rng.normal(size=(3,)) * 1e-17,
             "b": np.array([[math.pi]])}
    meta = {"variant": "test", "lr": 0.002}
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, state, meta)
    loaded, loaded_meta = load_checkpoint(path)
    assert loaded_meta == meta
    for key, arr in state.items():
        assert loaded[key].shape == arr.shape
        assert np.array_equal(loaded[key], arr)   # exact, not approx


def test_matmul_shape_errors():
    with pytest.raises(ConfigError):
        nn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ConfigError):
        nn.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
