"""
Ensemble de modèles de dynamique gaussiens.

Chaque membre prédit, à partir de (s, a) normalisés, la moyenne et la
log-variance diagonale du delta s' - s normalisé. L'entraînement minimise
la log-vraisemblance négative sur un échantillon bootstrap propre à chaque
membre, avec arrêt anticipé sur une validation commune de 10 %. Les
meilleurs membres (élites) servent aux rollouts et au Performance Ratio.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.cmdp_env import ACTION_HIGH, ACTION_LOW, CmdpEnv, Transition
from src.diffnum import (
    MlpParams,
    adam_init,
    adam_step,
    clip,
    exp,
    forward,
    init_mlp,
    mlp_from_dict,
    mlp_to_dict,
    reduce_sum,
    value_and_gradient,
    value_of,
)
from src.exceptions import DatasetTooSmallError, ShapeError, UntrainedEnsembleError
from src.lagrangian_ppo import GaussianPolicy
from src.schemas import EnsembleConfig


logger = logging.getLogger(__name__)

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0
STD_FLOOR = 1e-8
MIN_TRANSITIONS = 100
SEED_BOUND = 2 ** 63 - 1
ENSEMBLE_FORMAT = "mbppo-ensemble"
ENSEMBLE_FORMAT_VERSION = 1


# -------------------------------------------------------------------------
# Normalisation et données
# -------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Normalizer:
    """Moyenne et écart-type par dimension ; un écart-type < 1e-8 est remplacé par 1."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ShapeError(f"moyenne {mean.shape} et écart-type {std.shape} incompatibles")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("statistiques de normalisation non finies")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", np.where(std < STD_FLOOR, 1.0, std))

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        return cls(mean=data.mean(axis=0), std=data.std(axis=0))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass(eq=False)
class TransitionDataset:
    """Transitions réelles (s, a, s') accumulées au fil des collectes."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.states) == len(self.actions) == len(self.next_states)):
            raise ShapeError("états, actions et états suivants de longueurs différentes")

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionDataset":
        if not transitions:
            raise DatasetTooSmallError("aucune transition")
        return cls(
            states=np.vstack([tr.state for tr in transitions]),
            actions=np.vstack([tr.action for tr in transitions]),
            next_states=np.vstack([tr.next_state for tr in transitions]),
        )

    def extend(self, transitions: Sequence[Transition]) -> "TransitionDataset":
        if not transitions:
            return self
        other = TransitionDataset.from_transitions(transitions)
        return TransitionDataset(
            states=np.vstack([self.states, other.states]),
            actions=np.vstack([self.actions, other.actions]),
            next_states=np.vstack([self.next_states, other.next_states]),
        )

    def inputs(self) -> np.ndarray:
        return np.hstack([self.states, self.actions])

    def targets(self) -> np.ndarray:
        return self.next_states - self.states


# -------------------------------------------------------------------------
# Membres et ensemble
# -------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class GaussianDynamicsMember:
    """Un membre : MLP (s, a) -> (moyenne, log-variance) du delta normalisé."""

    trunk: MlpParams
    input_norm: Normalizer
    target_norm: Normalizer

    def __post_init__(self) -> None:
        ds = self.target_norm.mean.shape[0]
        if self.trunk.output_dim != 2 * ds:
            raise ShapeError(f"sortie {self.trunk.output_dim}, 2 x {ds} attendue")
        if self.trunk.input_dim != self.input_norm.mean.shape[0]:
            raise ShapeError("dimension d'entrée incompatible avec la normalisation")

    @property
    def state_dim(self) -> int:
        return self.target_norm.mean.shape[0]

    def predict(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Moyenne de s' et variance diagonale, dans l'espace d'origine.

        Returns:
            Tuple (moyenne de s', variance), formes (N, ds)
        """
        x = self.input_norm.normalize(np.hstack([np.atleast_2d(states), np.atleast_2d(actions)]))
        mean_n, log_var = split_output(forward(self.trunk, x), self.state_dim)
        delta = self.target_norm.denormalize(mean_n)
        variance = np.exp(log_var) * self.target_norm.std ** 2
        return np.atleast_2d(states) + delta, variance


def split_output(output: Any, state_dim: int) -> Tuple[Any, Any]:
    """Sépare la sortie (N, 2 ds) en moyenne et log-variance bornée à [-10, 4]."""
    return output[:, :state_dim], clip(output[:, state_dim:], LOG_VAR_MIN, LOG_VAR_MAX)


def gaussian_nll_sum(trunk: MlpParams, inputs: np.ndarray, targets: np.ndarray) -> Any:
    """
    Σ_t (μ - y)ᵀ Σ⁻¹ (μ - y) + log|Σ| sur des données déjà normalisées
    (constante d'intégration omise).
    """
    mean, log_var = split_output(forward(trunk, inputs), targets.shape[1])
    err = mean - targets
    return reduce_sum(err * err * exp(-log_var) + log_var)


def nll_loss(member: GaussianDynamicsMember, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray) -> float:
    """NLL d'un lot de transitions, normalisé avec les statistiques du membre."""
    x = member.input_norm.normalize(np.hstack([np.atleast_2d(states), np.atleast_2d(actions)]))
    y = member.target_norm.normalize(np.atleast_2d(next_states) - np.atleast_2d(states))
    return float(gaussian_nll_sum(member.trunk, x, y))


@dataclass(eq=False)
class DynamicsEnsemble:
    """n membres, NLL de validation par membre et indices des élites."""

    members: List[GaussianDynamicsMember]
    n_elites: int
    validation_nll: Optional[np.ndarray] = None
    initial_validation_nll: Optional[np.ndarray] = None
    elites: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise ValueError(f"un ensemble compte au moins 2 membres, reçu {len(self.members)}")
        if not 1 <= self.n_elites <= len(self.members):
            raise ValueError(f"n_elites={self.n_elites} hors de [1, {len(self.members)}]")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def trained(self) -> bool:
        return self.elites is not None

    @property
    def state_dim(self) -> int:
        return self.members[0].state_dim

    def require_trained(self) -> np.ndarray:
        if self.elites is None:
            raise UntrainedEnsembleError("l'ensemble doit être entraîné avant usage")
        return self.elites


def init_ensemble(
    state_dim: int,
    action_dim: int,
    config: EnsembleConfig,
    rng: np.random.Generator,
    scheme: str = "uniform_fan_in",
) -> DynamicsEnsemble:
    """Initialisations aléatoires indépendantes (source de diversité de l'ensemble)."""
    sizes = (state_dim + action_dim, *config.hidden, 2 * state_dim)
    members = [
        GaussianDynamicsMember(
            trunk=init_mlp(sizes, rng, scheme=scheme),
            input_norm=Normalizer.identity(state_dim + action_dim),
            target_norm=Normalizer.identity(state_dim),
        )
        for _ in range(config.n_members)
    ]
    return DynamicsEnsemble(members=members, n_elites=config.n_elites)


# -------------------------------------------------------------------------
# Entraînement
# -------------------------------------------------------------------------
def _mean_nll(trunk: MlpParams, inputs: np.ndarray, targets: np.ndarray) -> float:
    return float(gaussian_nll_sum(trunk, inputs, targets)) / len(inputs)


def _train_member(
    trunk: MlpParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    val_inputs: np.ndarray,
    val_targets: np.ndarray,
    config: EnsembleConfig,
    rng: np.random.Generator,
) -> Tuple[MlpParams, float, float, int]:
    """Adam + arrêt anticipé ; renvoie le meilleur instantané (jamais pire que l'initial)."""
    state = adam_init(trunk, config.lr)
    initial = _mean_nll(trunk, val_inputs, val_targets)
    best, best_trunk, stale, epochs = initial, trunk, 0, 0
    for _ in range(config.max_epochs):
        order = rng.permutation(len(inputs))
        for start in range(0, len(inputs), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = inputs[idx], targets[idx]
            _, grads = value_and_gradient(lambda p: gaussian_nll_sum(p, x, y) * (1.0 / len(idx)), trunk)
            trunk, state = adam_step(trunk, grads, state)
        epochs += 1
        current = _mean_nll(trunk, val_inputs, val_targets)
        if current < best:
            best, best_trunk, stale = current, trunk, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best_trunk, best, initial, epochs


def train_ensemble(
    ensemble: DynamicsEnsemble,
    dataset: TransitionDataset,
    config: EnsembleConfig,
    rng: np.random.Generator,
) -> DynamicsEnsemble:
    """
    Entraîne tous les membres (départ à chaud depuis leurs poids courants).

    Découpage validation/entraînement 10 %/90 % commun, bootstrap de la part
    d'entraînement par membre, élites = membres de plus faible NLL de validation.

    Raises:
        DatasetTooSmallError: Moins de 100 transitions
    """
    if len(dataset) < MIN_TRANSITIONS:
        raise DatasetTooSmallError(f"{len(dataset)} transitions, au moins {MIN_TRANSITIONS} requises")

    n = len(dataset)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    inputs, targets = dataset.inputs(), dataset.targets()
    input_norm = Normalizer.fit(inputs[train_idx])
    target_norm = Normalizer.fit(targets[train_idx])
    val_x = input_norm.normalize(inputs[val_idx])
    val_y = target_norm.normalize(targets[val_idx])
    member_seeds = rng.integers(0, SEED_BOUND, size=ensemble.size)

    def fit_member(i: int) -> Tuple[MlpParams, float, float, int]:
        member_rng = np.random.default_rng(int(member_seeds[i]))
        boot = train_idx[member_rng.integers(0, len(train_idx), size=len(train_idx))]
        return _train_member(
            ensemble.members[i].trunk,
            input_norm.normalize(inputs[boot]),
            target_norm.normalize(targets[boot]),
            val_x, val_y, config, member_rng,
        )

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            results = list(executor.map(fit_member, range(ensemble.size)))
    else:
        results = [fit_member(i) for i in range(ensemble.size)]

    members = [GaussianDynamicsMember(trunk=trunk, input_norm=input_norm, target_norm=target_norm) for trunk, *_ in results]
    validation = np.array([r[1] for r in results])
    initial = np.array([r[2] for r in results])
    elites = np.sort(np.argsort(validation, kind="stable")[: ensemble.n_elites])
    logger.info(
        f"Ensemble entraîné sur {n} transitions: NLL validation {np.round(validation, 3).tolist()}, "
        f"élites {elites.tolist()}, époques {[r[3] for r in results]}"
    )
    return DynamicsEnsemble(
        members=members,
        n_elites=ensemble.n_elites,
        validation_nll=validation,
        initial_validation_nll=initial,
        elites=elites,
    )


# -------------------------------------------------------------------------
# Échantillonnage et rollouts
# -------------------------------------------------------------------------
def _sample_from_members(
    ensemble: DynamicsEnsemble,
    member_ids: np.ndarray,
    states: np.ndarray,
    actions: np.ndarray,
    noise: np.ndarray,
) -> np.ndarray:
    out = np.empty_like(states)
    for member_id in np.unique(member_ids):
        rows = member_ids == member_id
        mean, variance = ensemble.members[member_id].predict(states[rows], actions[rows])
        out[rows] = mean + np.sqrt(variance) * noise[rows]
    return out


def sample_next_with_members(
    ensemble: DynamicsEnsemble,
    states: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tire s' ~ N(μ_q(s, a), Σ_q(s, a)) avec q élite choisie uniformément par ligne.

    Le choix des membres est tiré avant le bruit gaussien ; seul `rng` est consommé.

    Returns:
        Tuple (états suivants, indices des membres utilisés)
    """
    elites = ensemble.require_trained()
    single = np.ndim(states) == 1
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    member_ids = elites[rng.integers(0, len(elites), size=len(s))]
    noise = rng.standard_normal(s.shape)
    out = _sample_from_members(ensemble, member_ids, s, a, noise)
    return (out[0], member_ids) if single else (out, member_ids)


def sample_next(ensemble: DynamicsEnsemble, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return sample_next_with_members(ensemble, states, actions, rng)[0]


@dataclass(eq=False)
class ModelRollout:
    """Rollouts par lot dans le modèle : N épisodes de H pas."""

    states: np.ndarray
    actions: np.ndarray
    applied_actions: np.ndarray
    log_probs: np.ndarray


def model_rollout(
    ensemble: DynamicsEnsemble,
    policy: GaussianPolicy,
    initial_states: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    member: Optional[int] = None,
    deterministic: bool = False,
) -> ModelRollout:
    """
    Déroule la politique dans l'ensemble (membre tiré à chaque pas, ou membre fixe).

    Les actions brutes servent aux ratios PPO, les actions bornées à [-1, 1]
    sont celles données au modèle et aux fonctions de récompense et de coût.
    """
    ensemble.require_trained()
    s = np.atleast_2d(np.asarray(initial_states, dtype=np.float64))
    n, ds = s.shape
    states = np.empty((n, horizon + 1, ds))
    actions = np.empty((n, horizon, policy.action_dim))
    log_probs = np.empty((n, horizon))
    states[:, 0] = s
    for t in range(horizon):
        raw, logp = policy.sample_batch(states[:, t], rng, deterministic=deterministic)
        applied = np.clip(raw, ACTION_LOW, ACTION_HIGH)
        if member is None:
            states[:, t + 1] = sample_next(ensemble, states[:, t], applied, rng)
        else:
            noise = rng.standard_normal((n, ds))
            states[:, t + 1] = _sample_from_members(ensemble, np.full(n, member), states[:, t], applied, noise)
        actions[:, t] = raw
        log_probs[:, t] = logp
    return ModelRollout(states=states, actions=actions, applied_actions=np.clip(actions, ACTION_LOW, ACTION_HIGH), log_probs=log_probs)


def _member_return(
    ensemble: DynamicsEnsemble,
    member: int,
    policy: GaussianPolicy,
    env: CmdpEnv,
    gamma: float,
    horizon: int,
    episodes: int,
    rng: np.random.Generator,
) -> float:
    starts = np.vstack([env.sample_initial_state(rng) for _ in range(episodes)])
    rollout = model_rollout(ensemble, policy, starts, horizon, rng, member=member)
    rewards = env.reward_fn(rollout.states[:, :-1], rollout.applied_actions, rollout.states[:, 1:])
    return float(np.mean(np.sum(rewards * gamma ** np.arange(horizon), axis=1)))


def performance_ratio(
    ensemble: DynamicsEnsemble,
    policy_new: GaussianPolicy,
    policy_old: GaussianPolicy,
    env: CmdpEnv,
    gamma: float,
    horizon: int,
    episodes: int,
    rng: np.random.Generator,
) -> float:
    """
    Part des élites dans lesquelles la nouvelle politique a un retour moyen
    strictement supérieur à l'ancienne.

    Les deux politiques sont évaluées avec les mêmes nombres aléatoires
    (une graine par élite), le résultat est donc un multiple exact de 1 / élites.
    """
    elites = ensemble.require_trained()
    seeds = rng.integers(0, SEED_BOUND, size=len(elites))
    improved = 0
    for member, seed in zip(elites, seeds):
        new = _member_return(ensemble, int(member), policy_new, env, gamma, horizon, episodes, np.random.default_rng(int(seed)))
        old = _member_return(ensemble, int(member), policy_old, env, gamma, horizon, episodes, np.random.default_rng(int(seed)))
        improved += int(new > old)
    return improved / len(elites)


# -------------------------------------------------------------------------
# Sérialisation
# -------------------------------------------------------------------------
def ensemble_to_dict(ensemble: DynamicsEnsemble) -> Dict[str, Any]:
    def optional(values: Optional[np.ndarray]) -> Optional[list]:
        return None if values is None else np.asarray(values).tolist()

    return {
        "format": ENSEMBLE_FORMAT,
        "version": ENSEMBLE_FORMAT_VERSION,
        "n_elites": ensemble.n_elites,
        "members": [
            {
                "trunk": mlp_to_dict(m.trunk),
                "input_norm": {"mean": m.input_norm.mean.tolist(), "std": m.input_norm.std.tolist()},
                "target_norm": {"mean": m.target_norm.mean.tolist(), "std": m.target_norm.std.tolist()},
            }
            for m in ensemble.members
        ],
        "validation_nll": optional(ensemble.validation_nll),
        "initial_validation_nll": optional(ensemble.initial_validation_nll),
        "elites": optional(ensemble.elites),
    }


def ensemble_from_dict(payload: Dict[str, Any]) -> DynamicsEnsemble:
    if payload.get("format") != ENSEMBLE_FORMAT or payload.get("version") != ENSEMBLE_FORMAT_VERSION:
        raise ValueError(f"format d'ensemble non supporté: {payload.get('format')} v{payload.get('version')}")

    def optional(values: Optional[list], dtype=np.float64) -> Optional[np.ndarray]:
        return None if values is None else np.asarray(values, dtype=dtype)

    members = [
        GaussianDynamicsMember(
            trunk=mlp_from_dict(m["trunk"]),
            input_norm=Normalizer(**m["input_norm"]),
            target_norm=Normalizer(**m["target_norm"]),
        )
        for m in payload["members"]
    ]
    return DynamicsEnsemble(
        members=members,
        n_elites=int(payload["n_elites"]),
        validation_nll=optional(payload["validation_nll"]),
        initial_validation_nll=optional(payload["initial_validation_nll"]),
        elites=optional(payload["elites"], dtype=np.int64),
    )
