import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caad.exceptions import DataError, DivergenceError
from caad.neural import (
    Dense,
    DenseNet,
    LrSchedule,
    OptimizerState,
    adam_step,
    backward,
    forward,
    lr_at,
    sgd_step,
)

from gradcheck import check_all, random_case


def test_identity_layer_passes_input_through():
    net = DenseNet([Dense(np.eye(2), np.zeros(2), "linear")])
    out, _ = forward(net, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_all_zero_relu_net_outputs_zero():
    net = DenseNet([Dense(np.zeros((4, 3)), np.zeros(4), "relu"), Dense(np.zeros((2, 4)), np.zeros(2), "relu")])
    x = np.random.default_rng(1).normal(size=(5, 3)) * 100
    np.testing.assert_array_equal(net(x), np.zeros((5, 2)))


def test_forward_matches_matmul_oracle():
    rng = np.random.default_rng(42)
    net = DenseNet.build(5, (7,), 3, rng=rng, output_activation="sigmoid")
    x = rng.normal(size=5)
    w0, b0, w1, b1 = net.params
    hidden = [max(0.0, sum(w0[i, j] * x[j] for j in range(5)) + b0[i]) for i in range(7)]
    logits = [sum(w1[i, j] * hidden[j] for j in range(7)) + b1[i] for i in range(3)]
    expected = [1.0 / (1.0 + np.exp(-v)) for v in logits]
    np.testing.assert_allclose(net(x), expected, rtol=0, atol=1e-12)


def test_forward_rejects_bad_inputs():
    net = DenseNet.build(3, (4,), 1, rng=0)
    with pytest.raises(DataError, match="dimension 3"):
        net(np.zeros(4))
    with pytest.raises(DataError, match="non-finite"):
        net(np.array([0.0, np.nan, 1.0]))


def test_layers_must_chain():
    with pytest.raises(ValueError):
        DenseNet([Dense(np.zeros((4, 3)), np.zeros(4), "relu"), Dense(np.zeros((2, 5)), np.zeros(2), "linear")])


def test_linear_bias_gradient_is_upstream():
    net = DenseNet([Dense(np.array([[2.0, -1.0]]), np.array([0.5]), "linear")])
    out, cache = net.forward(np.array([1.0, 3.0]))
    grads, dx = backward(net, cache, np.array([1.0]))
    assert grads[1][0] == 1.0
    np.testing.assert_array_equal(grads[0], [[1.0, 3.0]])
    np.testing.assert_array_equal(dx, [2.0, -1.0])


def test_relu_blocks_gradient_at_negative_preactivation():
    net = DenseNet([Dense(np.array([[1.0], [-1.0]]), np.zeros(2), "relu"),
                    Dense(np.ones((1, 2)), np.zeros(1), "linear")])
    _, cache = net.forward(np.array([2.0]))
    grads, _ = net.backward(cache, np.array([1.0]))
    # second hidden unit has pre-activation -2
    assert grads[0][1, 0] == 0.0 and grads[1][1] == 0.0
    assert grads[0][0, 0] == 2.0


def test_backward_rejects_mismatched_upstream():
    net = DenseNet.build(3, (4,), 2, rng=0)
    _, cache = net.forward(np.zeros((2, 3)))
    with pytest.raises(DataError):
        net.backward(cache, np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_dense_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    f, params, grads = random_case(rng, "dense", False)
    ok, worst_rel, worst_abs = check_all(f, params, grads, rng)
    assert ok, (worst_rel, worst_abs)


def test_sgd_examples():
    p = [np.array([1.0])]
    sgd_step(p, [np.array([0.0])], 0.1)
    assert p[0][0] == 1.0
    sgd_step(p, [np.array([2.0])], 0.1)
    assert p[0][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_vector_matches_scalar_rule():
    rng = np.random.default_rng(3)
    p = rng.normal(size=(4, 5))
    g = rng.normal(size=(4, 5))
    expected = np.array([[p[i, j] - 0.01 * g[i, j] for j in range(5)] for i in range(4)])
    params = [p.copy()]
    sgd_step(params, [g], 0.01)
    np.testing.assert_array_equal(params[0], expected)


def test_sgd_rejects_non_finite_gradients():
    p = [np.ones(3)]
    with pytest.raises(DivergenceError):
        sgd_step(p, [np.array([0.0, np.inf, 0.0])], 0.1)
    np.testing.assert_array_equal(p[0], np.ones(3))


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    state = OptimizerState.for_params("adam", p, 1e-3)
    adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    p = [np.zeros(3)]
    state = OptimizerState.for_params("adam", p, 0.01)
    adam_step(p, [np.array([3.0, -0.2, 1e-3])], state)
    np.testing.assert_allclose(p[0], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_reduces_quadratic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=6)
    p = [a.copy()]
    state = OptimizerState.for_params("adam", p, 0.05)
    start = float(np.sum(p[0] ** 2))
    for _ in range(10):
        adam_step(p, [2 * p[0]], state)
    assert np.sum(p[0] ** 2) < start


def test_adam_requires_adam_state():
    p = [np.zeros(2)]
    with pytest.raises(ValueError):
        adam_step(p, [np.ones(2)], OptimizerState.for_params("sgd", p, 0.1))


def test_optimizer_moments_match_parameter_shapes():
    p = [np.zeros((3, 2)), np.zeros(3)]
    adam = OptimizerState.for_params("adam", p, 1e-3)
    assert [m.shape for m in adam.m] == [(3, 2), (3,)] and [v.shape for v in adam.v] == [(3, 2), (3,)]
    sgd = OptimizerState.for_params("sgd", p, 1e-3)
    assert not sgd.m and not sgd.v


def test_lr_schedule_endpoints():
    s = LrSchedule(5e-4, 1e-6, 1000)
    assert lr_at(s, 0) == 5e-4
    assert lr_at(s, 1000) == 1e-6
    assert lr_at(s, 500) == pytest.approx((5e-4 + 1e-6) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(s, 1001)
    with pytest.raises(ValueError):
        LrSchedule(1e-6, 5e-4, 10)


@given(st.integers(1, 500), st.floats(1e-6, 1.0), st.floats(1e-9, 1.0))
def test_lr_schedule_is_non_increasing(total, initial, frac):
    s = LrSchedule(initial, initial * frac, total)
    values = [lr_at(s, k) for k in range(total + 1)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_training_trajectory_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        net = DenseNet.build(4, (6,), 1, rng=rng)
        x = rng.normal(size=(8, 4))
        state = OptimizerState.for_params("adam", net.params, 1e-2)
        for _ in range(5):
            out, cache = net.forward(x)
            grads, _ = net.backward(cache, out / len(x))
            adam_step(net.params, grads, state)
        return np.concatenate([p.ravel() for p in net.params])

    np.testing.assert_array_equal(run(), run())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batch_forward_equals_rowwise(seed):
    rng = np.random.default_rng(seed)
    net = DenseNet.build(3, (5, 4), 2, rng=rng, output_activation="sigmoid")
    x = rng.normal(size=(6, 3))
    batch = net(x)
    rows = np.stack([net(r) for r in x])
    np.testing.assert_allclose(batch, rows, rtol=0, atol=1e-14)
