from __future__ import annotations

import json
from dataclasses import replace
from typing import Sequence

import numpy as np
import pytest

from src.cmdp_env import CmdpEnv
from src.diffnum import MlpParams, finite_difference_gradient, forward, gradient, tree_flatten
from src.dynamics_model import (
    DynamicsEnsemble,
    GaussianDynamicsMember,
    Normalizer,
    TransitionDataset,
    ensemble_from_dict,
    ensemble_to_dict,
    gaussian_nll_sum,
    init_ensemble,
    model_rollout,
    nll_loss,
    performance_ratio,
    sample_next,
    sample_next_with_members,
    split_output,
    train_ensemble,
)
from src.exceptions import DatasetTooSmallError, UntrainedEnsembleError
from src.lagrangian_ppo import GaussianPolicy, init_policy
from src.schemas import EnsembleConfig


class DriftEnv(CmdpEnv):
    """Environnement 1-D : départ en 0, récompense s * a (croissante en a dès que s > 0)."""

    name = "drift"

    def __init__(self, horizon: int = 10, gamma: float = 0.99) -> None:
        super().__init__(obs_dim=1, action_dim=1, horizon=horizon, gamma=gamma)

    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(1)

    def transition(self, state, action, rng):
        return state + 0.1

    def reward_fn(self, state, action, next_state):
        return np.asarray(state)[..., 0] * np.asarray(action)[..., 0]

    def cost_fn(self, state, action, next_state):
        return np.zeros(np.shape(state)[:-1])


def constant_member(delta: Sequence[float], log_var: float = 0.0, action_dim: int = 1, target_std: float = 1.0) -> GaussianDynamicsMember:
    """Membre linéaire à poids nuls : delta et log-variance constants."""
    ds = len(delta)
    trunk = MlpParams(
        layer_sizes=(ds + action_dim, 2 * ds),
        weights=(np.zeros((ds + action_dim, 2 * ds)),),
        biases=(np.concatenate([np.asarray(delta, dtype=np.float64), np.full(ds, log_var)]),),
    )
    return GaussianDynamicsMember(
        trunk=trunk,
        input_norm=Normalizer.identity(ds + action_dim),
        target_norm=Normalizer(mean=np.zeros(ds), std=np.full(ds, target_std)),
    )


def constant_ensemble(deltas: Sequence[float], log_var: float = -10.0, target_std: float = 1.0) -> DynamicsEnsemble:
    members = [constant_member([d], log_var=log_var, target_std=target_std) for d in deltas]
    return DynamicsEnsemble(members=members, n_elites=len(members), elites=np.arange(len(members)))


def shifted(policy: GaussianPolicy, shift: float) -> GaussianPolicy:
    biases = list(policy.trunk.biases)
    biases[-1] = biases[-1] + shift
    return replace(policy, trunk=replace(policy.trunk, biases=tuple(biases)))


def linear_dataset(n: int, rng: np.random.Generator, noise: float = 0.01) -> TransitionDataset:
    a_mat = np.eye(3) + 0.05 * rng.standard_normal((3, 3))
    b_mat = 0.1 * rng.standard_normal((3, 2))
    states = rng.standard_normal((n, 3))
    actions = rng.uniform(-1.0, 1.0, size=(n, 2))
    next_states = states @ a_mat.T + actions @ b_mat.T + noise * rng.standard_normal((n, 3))
    return TransitionDataset(states, actions, next_states)


# ------------------------------
# Normalisation
# ------------------------------
def test_normalizer_floors_degenerate_std():
    norm = Normalizer.fit(np.array([[1.0, 2.0], [1.0, 4.0]]))
    np.testing.assert_array_equal(norm.std, [1.0, 1.0])
    np.testing.assert_allclose(norm.denormalize(norm.normalize(np.array([3.0, 5.0]))), [3.0, 5.0])


# ------------------------------
# NLL
# ------------------------------
def test_nll_zero_for_perfect_unit_variance_prediction():
    member = constant_member([0.0, 0.0])
    s = np.array([[0.3, -0.2]])
    assert nll_loss(member, s, np.zeros((1, 1)), s) == pytest.approx(0.0)


def test_nll_equals_dimension_for_variance_e():
    member = constant_member([0.0, 0.0, 0.0], log_var=1.0)
    s = np.array([[0.3, -0.2, 1.0]])
    assert nll_loss(member, s, np.zeros((1, 1)), s) == pytest.approx(3.0)


def test_nll_matches_dense_gaussian(rng):
    config = EnsembleConfig(n_members=2, n_elites=1, hidden=(6,))
    member = init_ensemble(2, 1, config, rng).members[0]
    s, a, s_next = rng.standard_normal((5, 2)), rng.standard_normal((5, 1)), rng.standard_normal((5, 2))
    output = np.asarray(forward(member.trunk, np.hstack([s, a])))
    mean, log_var = split_output(output, 2)
    expected = 0.0
    for i in range(5):
        cov = np.diag(np.exp(np.asarray(log_var)[i]))
        err = mean[i] - (s_next[i] - s[i])
        expected += err @ np.linalg.inv(cov) @ err + np.log(np.linalg.det(cov))
    assert nll_loss(member, s, a, s_next) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_nll_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    config = EnsembleConfig(n_members=2, n_elites=1, hidden=(5,))
    trunk = init_ensemble(2, 1, config, rng).members[0].trunk
    inputs, targets = rng.standard_normal((8, 3)), rng.standard_normal((8, 2))
    loss = lambda p: gaussian_nll_sum(p, inputs, targets)
    analytic = tree_flatten(gradient(loss, trunk))[0]
    numeric = tree_flatten(finite_difference_gradient(loss, trunk))[0]
    for a, b in zip(analytic, numeric):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-6)


def test_log_variance_is_clamped():
    member = constant_member([0.0], log_var=50.0)
    _, variance = member.predict(np.zeros((1, 1)), np.zeros((1, 1)))
    assert variance[0, 0] == pytest.approx(np.exp(4.0))


# ------------------------------
# Entraînement
# ------------------------------
def test_train_rejects_small_dataset(rng):
    config = EnsembleConfig(n_members=2, n_elites=1, hidden=(4,))
    ensemble = init_ensemble(3, 2, config, rng)
    with pytest.raises(DatasetTooSmallError):
        train_ensemble(ensemble, linear_dataset(99, rng), config, rng)


def test_training_never_worsens_validation_and_selects_elites(rng):
    config = EnsembleConfig(n_members=3, n_elites=2, hidden=(16,), max_epochs=5, batch_size=64, lr=1e-2)
    trained = train_ensemble(init_ensemble(3, 2, config, rng), linear_dataset(400, rng), config, rng)
    assert trained.trained
    assert np.all(trained.validation_nll <= trained.initial_validation_nll)
    assert len(trained.elites) == 2
    worst = int(np.argmax(trained.validation_nll))
    assert worst not in trained.elites.tolist()


def test_members_differ_after_training(rng):
    config = EnsembleConfig(n_members=2, n_elites=2, hidden=(8,), max_epochs=3)
    trained = train_ensemble(init_ensemble(3, 2, config, rng), linear_dataset(200, rng), config, rng)
    a, b = (tree_flatten(m.trunk)[0] for m in trained.members)
    assert any(not np.array_equal(x, y) for x, y in zip(a, b))


def test_static_system_predicts_zero_delta(rng):
    states = rng.normal(0.0, 50.0, size=(300, 2))
    dataset = TransitionDataset(states, rng.uniform(-1, 1, size=(300, 1)), states.copy())
    config = EnsembleConfig(n_members=2, n_elites=1, hidden=(16,), lr=2e-3, batch_size=32, max_epochs=300, patience=30)
    trained = train_ensemble(init_ensemble(2, 1, config, rng), dataset, config, rng)
    member = trained.members[int(trained.elites[0])]
    probe = rng.normal(0.0, 50.0, size=(20, 2))
    mean, _ = member.predict(probe, np.zeros((20, 1)))
    assert np.max(np.abs(mean - probe)) <= 1e-2


@pytest.mark.slow
def test_linear_gaussian_dynamics_reach_noise_floor():
    rng = np.random.default_rng(0)
    sigma = 0.01
    data = linear_dataset(5000, rng, noise=sigma)
    config = EnsembleConfig(n_members=4, n_elites=3, hidden=(64, 64), lr=1e-3, batch_size=128, max_epochs=200, patience=10)
    trained = train_ensemble(init_ensemble(3, 2, config, rng), data, config, rng)
    assert np.all(trained.validation_nll < trained.initial_validation_nll)
    held_out = linear_dataset(1000, np.random.default_rng(0), noise=sigma)
    # même dynamique (graine 0) : le premier tirage fixe A et B
    errors = []
    for elite in trained.elites:
        mean, _ = trained.members[int(elite)].predict(held_out.states, held_out.actions)
        errors.append(np.sqrt(np.mean((mean - held_out.next_states) ** 2)))
    assert np.mean(errors) <= 1.5 * sigma


# ------------------------------
# Échantillonnage
# ------------------------------
def test_untrained_ensemble_cannot_sample(rng):
    config = EnsembleConfig(n_members=2, n_elites=1, hidden=(4,))
    with pytest.raises(UntrainedEnsembleError):
        sample_next(init_ensemble(2, 1, config, rng), np.zeros(2), np.zeros(1), rng)


def test_single_elite_is_always_used(rng):
    ensemble = constant_ensemble([0.1, 0.2, 0.3])
    ensemble.elites = np.array([1])
    _, members = sample_next_with_members(ensemble, np.zeros((50, 1)), np.zeros((50, 1)), rng)
    assert set(members.tolist()) == {1}


def test_member_choice_is_uniform_over_elites(rng):
    ensemble = constant_ensemble([0.0] * 6)
    ensemble.elites = np.array([0, 2, 3, 5])
    _, members = sample_next_with_members(ensemble, np.zeros((10_000, 1)), np.zeros((10_000, 1)), rng)
    counts = np.array([np.sum(members == m) for m in (0, 2, 3, 5)])
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) <= 3 * sigma)


def test_near_zero_variance_sample_is_the_mean(rng):
    ensemble = constant_ensemble([0.5, 0.5], log_var=-10.0, target_std=0.01)
    s = np.array([1.0])
    assert sample_next(ensemble, s, np.zeros(1), rng) == pytest.approx(s + 0.5 * 0.01, abs=1e-3)


def test_sampling_is_deterministic_for_fixed_rng():
    ensemble = constant_ensemble([0.1, -0.1], log_var=0.0)
    a = sample_next(ensemble, np.ones((3, 1)), np.zeros((3, 1)), np.random.default_rng(5))
    b = sample_next(ensemble, np.ones((3, 1)), np.zeros((3, 1)), np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_model_rollout_shapes_and_clipping(rng):
    ensemble = constant_ensemble([0.1, 0.1])
    policy = init_policy(1, 1, (4,), rng, init_log_std=1.0)
    rollout = model_rollout(ensemble, policy, np.zeros((7, 1)), 5, rng)
    assert rollout.states.shape == (7, 6, 1)
    assert rollout.actions.shape == (7, 5, 1)
    assert np.all(np.abs(rollout.applied_actions) <= 1.0)
    np.testing.assert_allclose(rollout.states[:, -1, 0], 0.5, atol=0.1)


# ------------------------------
# Performance Ratio
# ------------------------------
def test_identical_policies_give_zero_ratio(rng):
    policy = init_policy(1, 1, (4,), rng)
    ensemble = constant_ensemble([0.1] * 6)
    assert performance_ratio(ensemble, policy, policy, DriftEnv(), 0.99, 10, 3, rng) == 0.0


def test_uniformly_better_policy_gives_ratio_one(rng):
    policy = init_policy(1, 1, (4,), rng)
    ensemble = constant_ensemble([0.1] * 6)
    assert performance_ratio(ensemble, shifted(policy, 0.3), policy, DriftEnv(), 0.99, 10, 3, rng) == 1.0


def test_improvement_in_four_of_six_members(rng):
    policy = init_policy(1, 1, (4,), rng)
    # dérive négative : les états deviennent négatifs, une action plus grande coûte
    ensemble = constant_ensemble([0.1, 0.1, -0.1, 0.1, -0.1, 0.1])
    ratio = performance_ratio(ensemble, shifted(policy, 0.3), policy, DriftEnv(), 0.99, 10, 3, rng)
    assert ratio == 4 / 6


def test_ratio_counts_only_elites(rng):
    policy = init_policy(1, 1, (4,), rng)
    ensemble = constant_ensemble([0.1, 0.1, -0.1, -0.1])
    ensemble.elites = np.array([0, 1, 2])
    ratio = performance_ratio(ensemble, shifted(policy, 0.3), policy, DriftEnv(), 0.99, 10, 3, rng)
    assert ratio == 2 / 3


# ------------------------------
# Sérialisation
# ------------------------------
def test_ensemble_dict_preserves_predictions(rng):
    config = EnsembleConfig(n_members=2, n_elites=1, hidden=(8,), max_epochs=2)
    trained = train_ensemble(init_ensemble(3, 2, config, rng), linear_dataset(150, rng), config, rng)
    restored = ensemble_from_dict(json.loads(json.dumps(ensemble_to_dict(trained))))
    np.testing.assert_array_equal(restored.elites, trained.elites)
    s, a = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    for original, copy in zip(trained.members, restored.members):
        np.testing.assert_array_equal(copy.predict(s, a)[0], original.predict(s, a)[0])
