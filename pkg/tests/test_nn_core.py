import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hact.nn_core import (
    AdamState,
    BatchNormState,
    LstmParams,
    MlpParams,
    ShapeError,
    adam_step,
    batch_norm,
    batch_norm_backward,
    gradcheck,
    graph_norm,
    graph_norm_backward,
    lstm_sequence,
    lstm_sequence_backward,
    mlp_backward,
    mlp_forward,
    numeric_gradient,
    relative_error,
    softmax_cross_entropy,
)

finite = st.floats(-10, 10, allow_nan=False)


def test_identity_mlp_returns_input(rng):
    p = MlpParams([np.eye(3)], [np.zeros(3)])
    x = rng.normal(size=(5, 3))
    y, _ = mlp_forward(p, x)
    np.testing.assert_array_equal(y, x)


def test_zero_weight_mlp_outputs_bias(rng):
    b = np.array([1.0, -2.0])
    p = MlpParams([np.zeros((4, 2))], [b])
    y, _ = mlp_forward(p, rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(y, np.tile(b, (3, 1)))


def test_mlp_shape_error_names_dims(rng):
    p = MlpParams.init([4, 3], rng)
    with pytest.raises(ShapeError, match="4"):
        mlp_forward(p, np.zeros((2, 5)))


def test_mlp_backward_matches_finite_differences(rng):
    p = MlpParams.init([4, 6, 3], rng)
    p.biases[0] += 0.1
    x = rng.normal(size=(7, 4))
    w = rng.normal(size=(7, 3))

    def loss():
        return float((mlp_forward(p, x)[0] * w).sum())

    y, cache = mlp_forward(p, x)
    dx, grads = mlp_backward(p, w, cache)
    params = {**p.named(), "x": x}
    grads = {**grads, "x": dx}
    assert gradcheck(loss, params, grads) < 1e-6


def test_lstm_length_one_is_single_cell(rng):
    p = LstmParams.init(3, 4, rng)
    x = rng.normal(size=(2, 3))
    h, _ = lstm_sequence(p, [x])
    z = x @ p.w_x + p.b
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, g, o = sig(z[:, :4]), np.tanh(z[:, 8:12]), sig(z[:, 12:])
    np.testing.assert_allclose(h, o * np.tanh(i * g), atol=1e-14)


def test_lstm_zero_params_give_zero_output(rng):
    h, _ = lstm_sequence(LstmParams.zeros(3, 5), [rng.normal(size=(4, 3)) for _ in range(3)])
    np.testing.assert_array_equal(h, 0.0)


def test_lstm_empty_sequence_raises():
    with pytest.raises(ValueError):
        lstm_sequence(LstmParams.zeros(2, 2), [])


def test_lstm_gradients_match_finite_differences(rng):
    p = LstmParams.init(3, 4, rng)
    p.b += rng.normal(0, 0.3, p.b.shape)
    seq = [rng.normal(size=(5, 3)) for _ in range(3)]
    w = rng.normal(size=(5, 4))

    def loss():
        return float((lstm_sequence(p, seq)[0] * w).sum())

    _, cache = lstm_sequence(p, seq)
    dxs, grads = lstm_sequence_backward(p, w, cache)
    params = {**p.named(), **{f"x{t}": x for t, x in enumerate(seq)}}
    grads = {**grads, **{f"x{t}": d for t, d in enumerate(dxs)}}
    assert gradcheck(loss, params, grads) < 1e-4


def test_graph_norm_examples():
    x = np.array([[2.0, 2.0]])
    np.testing.assert_array_equal(graph_norm(x, 1), x)
    np.testing.assert_array_equal(graph_norm(x, 4), [[1.0, 1.0]])


@given(arrays(np.float64, (3, 2), elements=finite), st.floats(-5, 5), st.integers(1, 50))
def test_graph_norm_is_homogeneous(x, a, n):
    np.testing.assert_allclose(graph_norm(a * x, n), a * graph_norm(x, n), atol=1e-12)


def test_graph_norm_backward_scales_rows(rng):
    counts = np.array([1.0, 4.0, 4.0, 9.0])
    dy = rng.normal(size=(4, 3))
    np.testing.assert_allclose(graph_norm_backward(dy, counts), dy / np.sqrt(counts)[:, None], rtol=1e-15)


def test_batch_norm_train_standardizes(rng):
    state = BatchNormState.init(3)
    x = rng.normal(2.0, 3.0, size=(50, 3))
    y, _ = batch_norm(x, state, "train")
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-3)


def test_batch_norm_eval_uses_running_stats(rng):
    state = BatchNormState.init(2)
    state.running_mean[:] = [1.0, -1.0]
    state.running_var[:] = 1.0
    x = rng.normal(size=(4, 2))
    y, _ = batch_norm(x, state, "eval")
    np.testing.assert_allclose(y, (x - state.running_mean) / np.sqrt(1.0 + 1e-5), atol=1e-12)


def test_batch_norm_single_row_train_raises():
    with pytest.raises(ValueError):
        batch_norm(np.zeros((1, 3)), BatchNormState.init(3), "train")


def test_batch_norm_updates_running_stats_with_momentum(rng):
    state = BatchNormState.init(2)
    x = rng.normal(size=(10, 2))
    batch_norm(x, state, "train")
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0), atol=1e-15)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradcheck(rng, mode):
    state = BatchNormState.init(3)
    state.gamma[:] = rng.uniform(0.5, 1.5, 3)
    state.beta[:] = rng.normal(size=3)
    state.running_var[:] = rng.uniform(0.5, 2, 3)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 3))

    def loss():
        return float((batch_norm(x, state, mode, update_stats=False)[0] * w).sum())

    _, cache = batch_norm(x, state, mode, update_stats=False)
    dx, grads = batch_norm_backward(w, state, cache)
    params = {**state.named(), "x": x}
    assert gradcheck(loss, params, {**grads, "x": dx}) < 1e-4


def test_cross_entropy_examples():
    loss, grad = softmax_cross_entropy(np.array([[0.0, 0.0]]), [0])
    assert loss == pytest.approx(np.log(2))
    loss, grad = softmax_cross_entropy(np.array([[1000.0, -1000.0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


@given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_cross_entropy_grad_rows_sum_to_zero(logits, labels):
    loss, grad = softmax_cross_entropy(logits, labels)
    assert np.isfinite(loss)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_cross_entropy_gradcheck(rng):
    logits = rng.normal(size=(5, 4))
    labels = [0, 3, 1, 1, 2]
    _, grad = softmax_cross_entropy(logits, labels)
    assert gradcheck(lambda: softmax_cross_entropy(logits, labels)[0], {"z": logits}, {"z": grad}) < 1e-7


def test_adam_zero_gradient_is_fixed_point(rng):
    p = {"w": rng.normal(size=(3, 2))}
    before = p["w"].copy()
    state = AdamState()
    adam_step(state, p, {"w": np.zeros((3, 2))})
    np.testing.assert_array_equal(p["w"], before)
    assert state.step == 1


@given(arrays(np.float64, (5,), elements=st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3)))
def test_adam_first_step_is_lr_sign(g):
    p = {"w": np.zeros(5)}
    adam_step(AdamState(lr=1e-3), p, {"w": g})
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_rejects_nonfinite_gradient_by_name():
    with pytest.raises(FloatingPointError, match="layer.W"):
        adam_step(AdamState(), {"layer.W": np.zeros(2)}, {"layer.W": np.array([1.0, np.nan])})


def test_gradcheck_linear_closure_is_exact(rng):
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    assert gradcheck(lambda: float((a * w).sum()), {"a": a}, {"a": w}) < 1e-9


def test_gradcheck_detects_corrupted_gradient(rng):
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    bad = w.copy()
    bad[1, 2] += 0.5
    assert gradcheck(lambda: float((a * w).sum()), {"a": a}, {"a": bad}) > 1e-2


def test_numeric_gradient_restores_array(rng):
    a = rng.normal(size=4)
    before = a.copy()
    numeric_gradient(lambda: float((a**2).sum()), a)
    np.testing.assert_array_equal(a, before)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1]))[0] == pytest.approx(0.1 / 1.1)
