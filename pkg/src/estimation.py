"""
Estimation : retours à venir, critiques V^R / V^C et GAE pour les deux canaux.

Le même chemin de code sert aux canaux récompense et coût ; seul le
choix du signal (`Channel`) change.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.cmdp_env import Channel, Transition
from src.diffnum import MlpParams, OptimizerState, adam_step, forward, init_mlp, reduce_mean, square, value_and_gradient
from src.exceptions import ShapeError


logger = logging.getLogger(__name__)

ValueFn = Callable[[np.ndarray], np.ndarray]
ADVANTAGE_EPS = 1e-8


@dataclass(eq=False)
class Episode:
    """
    Un épisode (réel ou imaginaire) sous forme de tableaux.

    `observations` contient s_0..s_T (longueur T+1), les autres tableaux
    sont indexés par pas de temps t = 0..T-1.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    log_probs: np.ndarray
    terminated: bool = False
    provenance: str = "real"

    def __post_init__(self) -> None:
        n = len(self.rewards)
        if n < 1:
            raise ShapeError("un épisode doit contenir au moins une transition")
        if len(self.observations) != n + 1:
            raise ShapeError(f"{len(self.observations)} observations pour {n} transitions")
        if not (len(self.actions) == len(self.costs) == len(self.log_probs) == n):
            raise ShapeError("actions, coûts et log-probabilités de longueurs différentes")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def states(self) -> np.ndarray:
        return self.observations[:-1]

    @property
    def next_states(self) -> np.ndarray:
        return self.observations[1:]

    def signal(self, channel: Channel | str) -> np.ndarray:
        return self.rewards if Channel(channel) is Channel.REWARD else self.costs

    def window(self, start: int, length: int) -> "Episode":
        """Sous-épisode [start, start + length) ; terminal seulement s'il atteint la fin."""
        stop = min(start + length, self.length)
        if not 0 <= start < stop:
            raise ShapeError(f"fenêtre [{start}, {start + length}) hors de l'épisode de longueur {self.length}")
        return Episode(
            observations=self.observations[start:stop + 1],
            actions=self.actions[start:stop],
            rewards=self.rewards[start:stop],
            costs=self.costs[start:stop],
            log_probs=self.log_probs[start:stop],
            terminated=self.terminated and stop == self.length,
            provenance=self.provenance,
        )

    @classmethod
    def from_transitions(
        cls,
        transitions: Sequence[Transition],
        log_probs: Sequence[float],
        actions: Optional[Sequence[np.ndarray]] = None,
        provenance: str = "real",
    ) -> "Episode":
        """`actions` remplace les actions bornées des transitions (actions brutes de la politique)."""
        return cls(
            observations=np.vstack([transitions[0].state] + [tr.next_state for tr in transitions]),
            actions=np.vstack(actions if actions is not None else [tr.action for tr in transitions]),
            rewards=np.array([tr.reward for tr in transitions]),
            costs=np.array([tr.cost for tr in transitions]),
            log_probs=np.asarray(log_probs, dtype=np.float64),
            terminated=transitions[-1].done,
            provenance=provenance,
        )


def returns_to_go(episode: Episode, gamma: float, channel: Channel | str = Channel.REWARD, bootstrap_value: float = 0.0) -> np.ndarray:
    """
    R̂_t = Σ_k γ^k x_{t+k+1}, tronqué en fin d'épisode.

    `bootstrap_value` est ajouté (actualisé) après le dernier pas, pour un
    épisode coupé par l'horizon plutôt que terminé.
    """
    signal = episode.signal(channel)
    out = np.empty(episode.length)
    running = bootstrap_value
    for t in range(episode.length - 1, -1, -1):
        running = signal[t] + gamma * running
        out[t] = running
    return out


def gae(
    episode: Episode,
    value_fn: ValueFn,
    gamma: float,
    lam: float,
    channel: Channel | str = Channel.REWARD,
    bootstrap_truncated: bool = True,
) -> np.ndarray:
    """
    Generalized Advantage Estimation.

    δ_t = x_{t+1} + γ V(s_{t+1}) - V(s_t), A_t = Σ_l (γλ)^l δ_{t+l}.
    V(s_T) vaut 0 si l'épisode est terminé (ou si bootstrap_truncated est faux).
    """
    signal = episode.signal(channel)
    values = np.asarray(value_fn(episode.observations), dtype=np.float64).reshape(episode.length + 1)
    if episode.terminated or not bootstrap_truncated:
        values = values.copy()
        values[-1] = 0.0
    deltas = signal + gamma * values[1:] - values[:-1]
    advantages = np.empty(episode.length)
    running = 0.0
    for t in range(episode.length - 1, -1, -1):
        running = deltas[t] + gamma * lam * running
        advantages[t] = running
    return advantages


# -------------------------------------------------------------------------
# Critiques
# -------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class CriticPair:
    """Réseaux de valeur V^R (paramètres ψ_r) et V^C (paramètres ψ_c)."""

    reward: MlpParams
    cost: MlpParams

    def __post_init__(self) -> None:
        if self.reward.input_dim != self.cost.input_dim:
            raise ShapeError("les deux critiques doivent partager la dimension d'observation")

    def value(self, channel: Channel | str, observations: np.ndarray) -> np.ndarray:
        params = self.reward if Channel(channel) is Channel.REWARD else self.cost
        return np.asarray(forward(params, observations))[..., 0]


def init_critics(obs_dim: int, hidden: Sequence[int], rng: np.random.Generator, scheme: str = "uniform_fan_in") -> CriticPair:
    sizes = (obs_dim, *hidden, 1)
    return CriticPair(reward=init_mlp(sizes, rng, scheme=scheme), cost=init_mlp(sizes, rng, scheme=scheme))


def critic_loss(params: MlpParams, observations: np.ndarray, targets: np.ndarray):
    """Erreur quadratique moyenne (1 / (M T)) Σ (V(s_t) - R̂_t)²."""
    predictions = forward(params, observations)[:, 0]
    return reduce_mean(square(predictions - targets))


# -------------------------------------------------------------------------
# Lot d'apprentissage
# -------------------------------------------------------------------------
@dataclass(eq=False)
class RolloutBatch:
    """Pas de temps aplatis d'un ensemble d'épisodes, avec retours et avantages des deux canaux."""

    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    reward_returns: np.ndarray
    cost_returns: np.ndarray
    reward_advantages: np.ndarray
    cost_advantages: np.ndarray
    provenance: np.ndarray
    episodes: List[Episode] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.log_probs)

    def subset(self, index: np.ndarray) -> "RolloutBatch":
        return RolloutBatch(
            observations=self.observations[index],
            actions=self.actions[index],
            log_probs=self.log_probs[index],
            reward_returns=self.reward_returns[index],
            cost_returns=self.cost_returns[index],
            reward_advantages=self.reward_advantages[index],
            cost_advantages=self.cost_advantages[index],
            provenance=self.provenance[index],
            episodes=self.episodes,
        )

    def minibatches(self, size: Optional[int], rng: np.random.Generator) -> Iterator["RolloutBatch"]:
        """Découpage aléatoire ; un seul lot complet si size est None."""
        if size is None or size >= self.size:
            yield self
            return
        order = rng.permutation(self.size)
        for start in range(0, self.size, size):
            yield self.subset(order[start:start + size])


def build_batch(
    episodes: Sequence[Episode],
    critics: CriticPair,
    gamma: float,
    lam: float,
    normalize_reward_advantages: bool = True,
) -> RolloutBatch:
    """
    Calcule retours à venir et avantages GAE pour les deux canaux.

    Les avantages de récompense sont standardisés (moyenne 0, écart-type 1),
    ceux de coût gardent leur échelle. Un épisode tronqué par l'horizon est
    complété par V(s_T) dans les deux canaux.
    """
    if not episodes:
        raise ShapeError("aucun épisode pour construire le lot")
    parts = {key: [] for key in ("r_ret", "c_ret", "r_adv", "c_adv")}
    for ep in episodes:
        for channel, ret_key, adv_key in ((Channel.REWARD, "r_ret", "r_adv"), (Channel.COST, "c_ret", "c_adv")):
            value_fn = lambda obs, ch=channel: critics.value(ch, obs)
            bootstrap = 0.0 if ep.terminated else float(value_fn(ep.observations[-1:])[0])
            parts[ret_key].append(returns_to_go(ep, gamma, channel, bootstrap_value=bootstrap))
            parts[adv_key].append(gae(ep, value_fn, gamma, lam, channel))

    reward_adv = np.concatenate(parts["r_adv"])
    if normalize_reward_advantages and len(reward_adv) > 1:
        reward_adv = (reward_adv - reward_adv.mean()) / (reward_adv.std() + ADVANTAGE_EPS)

    return RolloutBatch(
        observations=np.vstack([ep.states for ep in episodes]),
        actions=np.vstack([ep.actions for ep in episodes]),
        log_probs=np.concatenate([ep.log_probs for ep in episodes]),
        reward_returns=np.concatenate(parts["r_ret"]),
        cost_returns=np.concatenate(parts["c_ret"]),
        reward_advantages=reward_adv,
        cost_advantages=np.concatenate(parts["c_adv"]),
        provenance=np.concatenate([np.full(ep.length, ep.provenance) for ep in episodes]),
        episodes=list(episodes),
    )


def critic_update(
    critics: CriticPair,
    batch: RolloutBatch,
    state: OptimizerState,
) -> Tuple[CriticPair, OptimizerState, Tuple[float, float]]:
    """
    Un pas d'Adam sur les deux critiques.

    Les paramètres ψ_r et ψ_c sont disjoints : la somme des deux pertes
    donne à chacun exactement le gradient de sa propre perte.

    Returns:
        Tuple (critiques, état de l'optimiseur, (perte V^R, perte V^C) avant le pas)
    """
    def loss(pair: CriticPair):
        return (
            critic_loss(pair.reward, batch.observations, batch.reward_returns)
            + critic_loss(pair.cost, batch.observations, batch.cost_returns)
        )

    _, grads = value_and_gradient(loss, critics)
    losses = (
        float(critic_loss(critics.reward, batch.observations, batch.reward_returns)),
        float(critic_loss(critics.cost, batch.observations, batch.cost_returns)),
    )
    new_critics, new_state = adam_step(critics, grads, state)
    return new_critics, new_state, losses
