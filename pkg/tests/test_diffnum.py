from __future__ import annotations

import json

import numpy as np
import pytest

from src import diffnum
from src.diffnum import (
    MlpParams,
    Tensor,
    adam_init,
    adam_step,
    finite_difference_gradient,
    forward,
    gradient,
    init_mlp,
    mlp_from_dict,
    mlp_to_dict,
    optimizer_from_dict,
    optimizer_to_dict,
    tree_flatten,
    value_and_gradient,
)
from src.exceptions import NumericError, ShapeError


def _max_relative_error(a, b) -> float:
    la, _ = tree_flatten(a)
    lb, _ = tree_flatten(b)
    errors = [
        np.max(np.abs(x - y) / np.maximum(1e-6, np.abs(x) + np.abs(y)))
        for x, y in zip(la, lb)
    ]
    return float(max(errors))


# ------------------------------
# Tensor
# ------------------------------
def test_tensor_elementwise_gradients():
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    y = (x * x + 3.0 * x - x / 2.0).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 2.5)


def test_tensor_broadcast_gradient_is_reduced():
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    out = (np.ones((4, 2)) @ w + b).sum()
    out.backward()
    np.testing.assert_allclose(b.grad, np.full(3, 4.0))
    np.testing.assert_allclose(w.grad, np.full((2, 3), 4.0))


def test_minimum_tie_routes_gradient_to_first_argument():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    diffnum.minimum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0])


def test_clip_blocks_gradient_outside_range():
    x = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    x.clip(-1.0, 1.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * 2.0
    (y * y + y).backward()
    # d/dx (4x^2 + 2x) = 8x + 2
    assert float(x.grad) == pytest.approx(26.0)


# ------------------------------
# MLP
# ------------------------------
def test_init_mlp_is_reproducible():
    a = init_mlp([3, 5, 2], np.random.default_rng(7))
    b = init_mlp([3, 5, 2], np.random.default_rng(7))
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)


def test_init_mlp_uniform_fan_in_bounds():
    params = init_mlp([16, 4], np.random.default_rng(0))
    assert np.all(np.abs(params.weights[0]) <= 0.25)


def test_orthogonal_init_has_orthonormal_columns():
    params = init_mlp([8, 4, 1], np.random.default_rng(0), scheme="orthogonal")
    w = params.weights[0]
    np.testing.assert_allclose(w.T @ w, np.eye(4), atol=1e-12)
    np.testing.assert_array_equal(params.biases[0], np.zeros(4))


def test_zero_weights_give_bias_output():
    params = MlpParams(
        layer_sizes=(2, 3, 1),
        weights=(np.zeros((2, 3)), np.zeros((3, 1))),
        biases=(np.zeros(3), np.array([0.7])),
    )
    np.testing.assert_allclose(forward(params, np.array([[1.0, -2.0], [3.0, 4.0]])), [[0.7], [0.7]])


def test_forward_rejects_wrong_input_dimension(rng):
    params = init_mlp([3, 4, 1], rng)
    with pytest.raises(ShapeError):
        forward(params, np.zeros((5, 2)))


def test_mlp_params_rejects_inconsistent_shapes():
    with pytest.raises(ShapeError):
        MlpParams(layer_sizes=(2, 1), weights=(np.zeros((3, 1)),), biases=(np.zeros(1),))


def test_single_vector_and_batch_forward_agree(rng):
    params = init_mlp([3, 6, 2], rng)
    x = rng.standard_normal((4, 3))
    batch = forward(params, x)
    for i in range(4):
        np.testing.assert_allclose(forward(params, x[i]), batch[i])


# ------------------------------
# Gradients
# ------------------------------
@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = init_mlp([3, 5, 2], rng)
    x = rng.standard_normal((6, 3))
    y = rng.standard_normal((6, 2))

    def loss(p):
        return diffnum.square(forward(p, x) - y).mean()

    analytic = gradient(loss, params)
    numeric = finite_difference_gradient(loss, params)
    assert _max_relative_error(analytic, numeric) < 1e-4


def test_gradient_of_dict_tree():
    tree = {"a": np.array([1.0, 2.0]), "b": [np.array(3.0)]}
    value, grads = value_and_gradient(lambda t: (t["a"] * t["b"][0]).sum(), tree)
    assert value == pytest.approx(9.0)
    np.testing.assert_allclose(grads["a"], [3.0, 3.0])
    assert float(grads["b"][0]) == pytest.approx(3.0)


def test_non_finite_loss_raises_numeric_error():
    with pytest.raises(NumericError):
        value_and_gradient(lambda t: diffnum.log(t[0] * 0.0).sum(), [np.array([1.0])])


def test_constant_loss_has_zero_gradient(rng):
    params = init_mlp([2, 3, 1], rng)
    _, grads = value_and_gradient(lambda p: Tensor(np.array(1.5)), params)
    for g in tree_flatten(grads)[0]:
        assert not np.any(g)


# ------------------------------
# Adam
# ------------------------------
def test_adam_first_step_moves_by_learning_rate():
    params = [np.array([1.0, -1.0])]
    state = adam_init(params, learning_rate=0.1)
    new_params, new_state = adam_step(params, [np.array([2.0, -0.5])], state)
    # premier pas : m_hat / sqrt(v_hat) = signe(g)
    np.testing.assert_allclose(new_params[0], [0.9, -0.9], atol=1e-7)
    assert new_state.step == 1
    np.testing.assert_array_equal(params[0], [1.0, -1.0])


def test_adam_zero_gradient_leaves_params_unchanged(rng):
    params = init_mlp([2, 3, 1], rng)
    zeros = diffnum.tree_map(np.zeros_like, params)
    new_params, _ = adam_step(params, zeros, adam_init(params, 1e-3))
    for a, b in zip(tree_flatten(params)[0], tree_flatten(new_params)[0]):
        np.testing.assert_array_equal(a, b)


def test_adam_shape_mismatch_raises():
    state = adam_init([np.zeros(2)], 1e-3)
    with pytest.raises(ShapeError):
        adam_step([np.zeros(3)], [np.zeros(3)], state)


def test_adam_minimizes_quadratic():
    params = [np.array([5.0, -3.0])]
    state = adam_init(params, learning_rate=0.1)
    for _ in range(1000):
        grads = gradient(lambda p: diffnum.square(p[0]).sum(), params)
        params, state = adam_step(params, grads, state)
    np.testing.assert_allclose(params[0], [0.0, 0.0], atol=5e-2)


# ------------------------------
# Sérialisation
# ------------------------------
def test_mlp_dict_layout_is_row_major(rng):
    params = init_mlp([2, 3], rng)
    payload = json.loads(json.dumps(mlp_to_dict(params)))
    assert payload["format"] == "diffnum-mlp" and payload["version"] == 1
    assert payload["weights"][0] == params.weights[0].ravel().tolist()
    restored = mlp_from_dict(payload)
    np.testing.assert_array_equal(restored.weights[0], params.weights[0])


def test_mlp_from_dict_rejects_unknown_version(rng):
    payload = mlp_to_dict(init_mlp([2, 1], rng))
    payload["version"] = 99
    with pytest.raises(ValueError):
        mlp_from_dict(payload)


def test_optimizer_state_survives_json(rng):
    params = init_mlp([2, 3, 1], rng)
    state = adam_init(params, 3e-4)
    _, state = adam_step(params, diffnum.tree_map(np.ones_like, params), state)
    restored = optimizer_from_dict(json.loads(json.dumps(optimizer_to_dict(state))))
    assert restored.step == 1
    for a, b in zip(state.second_moment, restored.second_moment):
        np.testing.assert_array_equal(a, b)
