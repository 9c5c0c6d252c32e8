"""
Collecte de données dans l'environnement réel.

C'est le seul endroit où le compteur d'interactions réelles avance : les
rollouts imaginaires (dans l'ensemble de modèles) n'y touchent jamais.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from threading import Lock
from typing import List, Protocol, Sequence, Tuple

import numpy as np

from src.cmdp_env import CmdpEnv, Transition
from src.estimation import Episode


logger = logging.getLogger(__name__)

SEED_BOUND = 2 ** 63 - 1


class StochasticPolicy(Protocol):
    def sample(self, observation: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        ...


class InteractionCounter:
    """Nombre de pas effectués dans l'environnement réel (partagé entre threads)."""

    def __init__(self, value: int = 0) -> None:
        self._value = int(value)
        self._lock = Lock()

    @property
    def value(self) -> int:
        return self._value

    def advance(self, steps: int) -> int:
        if steps < 0:
            raise ValueError(f"avance négative: {steps}")
        with self._lock:
            self._value += steps
            return self._value


@dataclass
class CollectionStats:
    """Statistiques par épisode d'une collecte réelle."""

    reward_returns: List[float] = field(default_factory=list)
    cost_returns: List[float] = field(default_factory=list)
    episode_rewards: List[float] = field(default_factory=list)
    episode_costs: List[float] = field(default_factory=list)
    violations: List[int] = field(default_factory=list)
    steps: int = 0

    @property
    def total_violations(self) -> int:
        return int(sum(self.violations))

    def mean(self, name: str) -> float:
        values = getattr(self, name)
        return float(np.mean(values)) if values else 0.0


@dataclass
class RealCollection:
    episodes: List[Episode]
    transitions: List[Transition]
    stats: CollectionStats


def run_episode(
    env: CmdpEnv,
    policy: StochasticPolicy,
    horizon: int,
    rng: np.random.Generator,
) -> Tuple[Episode, List[Transition]]:
    """
    Un épisode complet (au plus `horizon` pas, arrêt à la terminaison).

    L'épisode garde les actions brutes tirées par la politique (pour les
    ratios de probabilité), les transitions gardent les actions bornées
    effectivement appliquées (pour le modèle de dynamique).
    """
    state = env.sample_initial_state(rng)
    transitions: List[Transition] = []
    raw_actions, log_probs = [], []
    for _ in range(horizon):
        action, log_prob = policy.sample(state, rng)
        tr = env.step_from(state, action, rng)
        transitions.append(tr)
        raw_actions.append(np.asarray(action, dtype=np.float64))
        log_probs.append(log_prob)
        state = tr.next_state
        if tr.done:
            break
    return Episode.from_transitions(transitions, log_probs, actions=raw_actions), transitions


def collect_real(
    env: CmdpEnv,
    policy: StochasticPolicy,
    horizon: int,
    episodes: int,
    rng: np.random.Generator,
    counter: InteractionCounter,
    workers: int = 1,
) -> RealCollection:
    """
    Collecte `episodes` épisodes réels avec la politique courante.

    Une graine par épisode est tirée de `rng` avant tout calcul : le
    résultat ne dépend pas du nombre de threads.

    Returns:
        RealCollection (épisodes, transitions, statistiques) ; le compteur
        avance exactement du nombre de pas effectués
    """
    if episodes <= 0 or horizon <= 0:
        return RealCollection([], [], CollectionStats())

    seeds = rng.integers(0, SEED_BOUND, size=episodes)
    run = lambda seed: run_episode(env, policy, horizon, np.random.default_rng(int(seed)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, seeds))
    else:
        results = [run(seed) for seed in seeds]

    gamma = env.cmdp_spec.gamma
    stats = CollectionStats()
    all_transitions: List[Transition] = []
    for episode, transitions in results:
        discount = gamma ** np.arange(episode.length)
        stats.reward_returns.append(float(np.sum(discount * episode.rewards)))
        stats.cost_returns.append(float(np.sum(discount * episode.costs)))
        stats.episode_rewards.append(float(np.sum(episode.rewards)))
        stats.episode_costs.append(float(np.sum(episode.costs)))
        stats.violations.append(int(np.sum(episode.costs == 1.0)))
        stats.steps += episode.length
        all_transitions.extend(transitions)

    total = counter.advance(stats.steps)
    logger.debug(f"Collecte réelle: {episodes} épisodes, {stats.steps} pas (total {total})")
    return RealCollection([ep for ep, _ in results], all_transitions, stats)
