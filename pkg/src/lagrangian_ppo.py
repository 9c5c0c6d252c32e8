"""
PPO-Lagrangian : acteur gaussien, objectifs PPO tronqués pour les canaux
récompense et coût, perte lagrangienne, montée projetée sur λ et boucle
d'entraînement sans modèle (référence de comparaison).

Le multiplicateur suit λ <- max(0, λ + η₂ (J^C - β d)) : il augmente tant
que le coût estimé dépasse le seuil.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.special import ndtr

from src.checkpoints import load_checkpoint, rng_from_dict, rng_to_dict, save_checkpoint
from src.cmdp_env import CmdpEnv, DiscreteCmdpEnv
from src.diffnum import (
    MlpParams,
    OptimizerState,
    adam_init,
    adam_step,
    clip,
    exp,
    forward,
    init_mlp,
    minimum,
    mlp_from_dict,
    mlp_to_dict,
    optimizer_from_dict,
    optimizer_to_dict,
    reduce_mean,
    reduce_sum,
    value_and_gradient,
    value_of,
)
from src.estimation import CriticPair, RolloutBatch, build_batch, critic_update, init_critics
from src.exceptions import NumericError, TrainingAborted
from src.rollouts import InteractionCounter, collect_real
from src.run_log import RunLog
from src.schemas import PpoConfig, RunConfig


logger = logging.getLogger(__name__)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# -------------------------------------------------------------------------
# Acteur
# -------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    """
    Politique gaussienne diagonale : moyenne donnée par un MLP, log-écart-type
    indépendant de l'état, borné à [-20, 2].
    """

    trunk: MlpParams
    log_std: Any

    def __post_init__(self) -> None:
        if tuple(np.shape(value_of(self.log_std))) != (self.trunk.output_dim,):
            raise ValueError(f"log_std de forme {np.shape(value_of(self.log_std))}, ({self.trunk.output_dim},) attendue")

    @property
    def action_dim(self) -> int:
        return self.trunk.output_dim

    def mean_action(self, observations: np.ndarray) -> Any:
        return forward(self.trunk, observations)

    def std(self) -> np.ndarray:
        return np.exp(np.clip(value_of(self.log_std), LOG_STD_MIN, LOG_STD_MAX))

    def log_prob(self, observations: np.ndarray, actions: np.ndarray) -> Any:
        """log π(a|s), sommé sur les dimensions d'action (Tensor si les paramètres en sont)."""
        mean = forward(self.trunk, observations)
        log_std = clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        z = (actions - mean) / exp(log_std)
        return reduce_sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)

    def sample(self, observation: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        mean = np.asarray(forward(self.trunk, observation))
        action = mean + self.std() * rng.standard_normal(mean.shape)
        return action, float(self.log_prob(observation, action))

    def sample_batch(self, observations: np.ndarray, rng: np.random.Generator, deterministic: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """Actions (N, A) et log-probabilités (N,) pour un lot d'observations."""
        mean = np.asarray(forward(self.trunk, observations))
        actions = mean if deterministic else mean + self.std() * rng.standard_normal(mean.shape)
        return actions, np.asarray(self.log_prob(observations, actions))


class DeterministicPolicy:
    """Face `sample` d'une politique gaussienne réduite à son action moyenne."""

    def __init__(self, policy: GaussianPolicy) -> None:
        self.policy = policy

    def sample(self, observation: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        return np.asarray(self.policy.mean_action(observation)), 0.0


def init_policy(
    obs_dim: int,
    action_dim: int,
    hidden: Tuple[int, ...],
    rng: np.random.Generator,
    init_log_std: float = math.log(0.6),
    scheme: str = "uniform_fan_in",
) -> GaussianPolicy:
    trunk = init_mlp((obs_dim, *hidden, action_dim), rng, scheme=scheme, output_scale=0.01)
    return GaussianPolicy(trunk=trunk, log_std=np.full(action_dim, init_log_std))


def policy_to_dict(policy: GaussianPolicy) -> Dict[str, Any]:
    return {"trunk": mlp_to_dict(policy.trunk), "log_std": value_of(policy.log_std).tolist()}


def policy_from_dict(payload: Dict[str, Any]) -> GaussianPolicy:
    return GaussianPolicy(trunk=mlp_from_dict(payload["trunk"]), log_std=np.asarray(payload["log_std"], dtype=np.float64))


def critics_to_dict(critics: CriticPair) -> Dict[str, Any]:
    return {"reward": mlp_to_dict(critics.reward), "cost": mlp_to_dict(critics.cost)}


def critics_from_dict(payload: Dict[str, Any]) -> CriticPair:
    return CriticPair(reward=mlp_from_dict(payload["reward"]), cost=mlp_from_dict(payload["cost"]))


def discrete_action_probabilities(policy: GaussianPolicy, env: DiscreteCmdpEnv) -> np.ndarray:
    """
    Politique stochastique (S, A) induite sur un CMDP discret.

    L'action 1-D est bornée à [-1, 1] puis découpée en |A| intervalles :
    les masses aux bornes reviennent aux intervalles extrêmes.
    """
    n_s, n_a = env.cmdp.n_states, env.cmdp.n_actions
    edges = np.linspace(-1.0, 1.0, n_a + 1)
    sigma = float(policy.std()[0])
    probs = np.zeros((n_s, n_a))
    for s in range(n_s):
        mu = float(np.asarray(policy.mean_action(env.one_hot(s)))[0])
        cdf = ndtr((edges - mu) / sigma)
        cdf[0], cdf[-1] = 0.0, 1.0
        probs[s] = np.diff(cdf)
    return probs


# -------------------------------------------------------------------------
# Multiplicateur de Lagrange
# -------------------------------------------------------------------------
@dataclass(frozen=True)
class LagrangeState:
    """λ >= 0, seuil d, resserrement β et pas η₂."""

    lam: float
    d: float
    beta: float = 1.0
    lr: float = 5e-2
    updates: int = 0

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ValueError(f"λ doit être >= 0, reçu {self.lam}")
        if not self.d > 0:
            raise ValueError(f"le seuil d doit être > 0, reçu {self.d}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"β doit être dans [0, 1], reçu {self.beta}")
        if not self.lr > 0:
            raise ValueError(f"η₂ doit être > 0, reçu {self.lr}")

    @property
    def threshold(self) -> float:
        return self.beta * self.d


def update_lambda(state: LagrangeState, cost_estimate: float) -> LagrangeState:
    """
    Montée projetée : λ' = max(0, λ + η₂ (J^C - β d)).

    Raises:
        NumericError: Si l'estimation de coût n'est pas finie
    """
    if not math.isfinite(cost_estimate):
        raise NumericError("estimation de coût non finie", cost_estimate)
    if cost_estimate < 0:
        raise ValueError(f"estimation de coût négative: {cost_estimate}")
    lam = max(0.0, state.lam + state.lr * (cost_estimate - state.threshold))
    return dataclasses.replace(state, lam=lam, updates=state.updates + 1)


# -------------------------------------------------------------------------
# Objectifs
# -------------------------------------------------------------------------
def clipped_surrogate(
    policy: GaussianPolicy,
    observations: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    epsilon: float,
) -> Any:
    """E_t[min(r_t A_t, clip(r_t, 1-ε, 1+ε) A_t)] avec r_t = π_θ(a|s) / π_old(a|s)."""
    ratio = exp(policy.log_prob(observations, actions) - old_log_probs)
    unclipped = ratio * advantages
    clipped = clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantages
    return reduce_mean(minimum(unclipped, clipped))


def lagrangian_policy_loss(
    policy: GaussianPolicy,
    batch: RolloutBatch,
    lam: float,
    epsilon: float,
    normalize: bool = True,
) -> Any:
    """Perte à minimiser : -(J^R - λ J^C), divisée par (1 + λ) si normalize."""
    j_r = clipped_surrogate(policy, batch.observations, batch.actions, batch.log_probs, batch.reward_advantages, epsilon)
    j_c = clipped_surrogate(policy, batch.observations, batch.actions, batch.log_probs, batch.cost_advantages, epsilon)
    loss = -(j_r - lam * j_c)
    if normalize:
        loss = loss * (1.0 / (1.0 + lam))
    return loss


@dataclass
class UpdateResult:
    policy: GaussianPolicy
    critics: CriticPair
    policy_state: OptimizerState
    critic_state: OptimizerState
    policy_loss: float
    reward_critic_loss: float
    cost_critic_loss: float
    epochs_run: int
    approx_kl: float


def ppo_update(
    policy: GaussianPolicy,
    critics: CriticPair,
    batch: RolloutBatch,
    policy_state: OptimizerState,
    critic_state: OptimizerState,
    lam: float,
    settings: PpoConfig,
    rng: np.random.Generator,
) -> UpdateResult:
    """
    K passes de mises à jour acteur + critiques sur un lot figé.

    λ reste constant pendant toute la phase. Arrêt anticipé si la KL
    approchée dépasse 1.5 × target_kl.
    """
    first_loss: Optional[float] = None
    critic_losses = (math.nan, math.nan)
    approx_kl = 0.0
    epochs_run = 0
    for _ in range(settings.update_epochs):
        for minibatch in batch.minibatches(settings.minibatch_size, rng):
            loss_value, grads = value_and_gradient(
                lambda p: lagrangian_policy_loss(p, minibatch, lam, settings.clip_epsilon, settings.normalize_loss),
                policy,
            )
            if first_loss is None:
                first_loss = loss_value
            policy, policy_state = adam_step(policy, grads, policy_state)
            critics, critic_state, critic_losses = critic_update(critics, minibatch, critic_state)
        epochs_run += 1
        approx_kl = float(np.mean(batch.log_probs - np.asarray(policy.log_prob(batch.observations, batch.actions))))
        if settings.target_kl is not None and approx_kl > 1.5 * settings.target_kl:
            logger.debug(f"Arrêt anticipé après {epochs_run} passes (KL {approx_kl:.4f})")
            break
    for value in (*critic_losses, approx_kl):
        if not math.isfinite(value):
            raise NumericError("perte de critique ou KL non finie", value)
    return UpdateResult(
        policy=policy,
        critics=critics,
        policy_state=policy_state,
        critic_state=critic_state,
        policy_loss=float(first_loss),
        reward_critic_loss=critic_losses[0],
        cost_critic_loss=critic_losses[1],
        epochs_run=epochs_run,
        approx_kl=approx_kl,
    )


# -------------------------------------------------------------------------
# Entraînement sans modèle
# -------------------------------------------------------------------------
class PPOLagrangianTrainer:
    """
    Boucle sans modèle : collecte -> mise à jour de λ -> estimation -> K passes PPO.

    Pour l'agent "ppo", λ reste figé à 0 mais les coûts sont toujours
    journalisés. L'estimation de coût utilisée pour λ est la moyenne des
    retours de coût actualisés du lot fraîchement collecté, comparée au seuil
    plein d (β = 1) : `mbppo.beta` ne resserre que le seuil de l'agent basé modèle.
    """

    kind = "model_free"

    def __init__(self, env: CmdpEnv, config: RunConfig, seed: int) -> None:
        self.env = env
        self.config = config
        self.seed = seed
        self.constrained = config.agent != "ppo"
        self.rng = np.random.default_rng(seed)
        spec = env.cmdp_spec
        self.policy = init_policy(
            spec.obs_dim, spec.action_dim, config.ppo.actor_hidden, self.rng,
            init_log_std=config.ppo.init_log_std, scheme=config.ppo.init_scheme,
        )
        self.critics = init_critics(spec.obs_dim, config.ppo.critic_hidden, self.rng, scheme=config.ppo.init_scheme)
        self.policy_state = adam_init(self.policy, config.ppo.actor_lr)
        self.critic_state = adam_init(self.critics, config.ppo.critic_lr)
        self.lagrange = LagrangeState(
            lam=config.ppo.lambda_init if self.constrained else 0.0,
            d=config.cost_limit,
            beta=1.0,
            lr=config.ppo.lambda_lr,
        )
        self.counter = InteractionCounter()
        self.log = RunLog()
        self.epoch = 0

    def snapshot(self, reason: str) -> Dict[str, Any]:
        """État diagnostique écrit en cas d'arrêt."""
        return {
            "reason": reason,
            "seed": self.seed,
            "epoch": self.epoch,
            "interactions": self.counter.value,
            "lagrange_multiplier": self.lagrange.lam,
            "log_std": value_of(self.policy.log_std).tolist(),
            "last_rows": self.log.rows[-3:],
        }

    def train_epoch(self) -> Dict[str, Any]:
        started = time.perf_counter()
        ppo = self.config.ppo
        collection = collect_real(
            self.env, self.policy, self.env.cmdp_spec.horizon, ppo.episodes_per_epoch,
            self.rng, self.counter, workers=self.config.collection_workers,
        )
        stats = collection.stats
        try:
            if self.constrained:
                self.lagrange = update_lambda(self.lagrange, stats.mean("cost_returns"))
            batch = build_batch(collection.episodes, self.critics, self.config.gamma, ppo.gae_lambda)
            result = ppo_update(
                self.policy, self.critics, batch, self.policy_state, self.critic_state,
                self.lagrange.lam, ppo, self.rng,
            )
        except NumericError as exc:
            raise TrainingAborted(f"graine {self.seed}, époque {self.epoch}: {exc}", snapshot=self.snapshot(str(exc))) from exc

        self.policy, self.critics = result.policy, result.critics
        self.policy_state, self.critic_state = result.policy_state, result.critic_state
        row = self.log.append(
            outer_epoch=self.epoch,
            phase="update",
            interactions=self.counter.value,
            reward_return=stats.mean("reward_returns"),
            cost_return=stats.mean("cost_returns"),
            episode_reward=stats.mean("episode_rewards"),
            episode_cost=stats.mean("episode_costs"),
            lagrange_multiplier=self.lagrange.lam,
            violations=stats.total_violations,
            wall_clock_seconds=time.perf_counter() - started,
        )
        logger.info(
            f"[{self.config.agent}] graine {self.seed} époque {self.epoch}: "
            f"J^R={row['reward_return']:.3f} J^C={row['cost_return']:.3f} λ={self.lagrange.lam:.4f} "
            f"interactions={row['interactions']}"
        )
        self.epoch += 1
        return row

    def run(self, budget: Optional[int] = None, checkpoint_path: Optional[Path] = None) -> RunLog:
        budget = budget if budget is not None else self.config.budget
        while self.counter.value < budget:
            self.train_epoch()
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        return self.log

    # ------------------------------
    # Reprise
    # ------------------------------
    def state_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "epoch": self.epoch,
            "interactions": self.counter.value,
            "policy": policy_to_dict(self.policy),
            "critics": critics_to_dict(self.critics),
            "policy_optimizer": optimizer_to_dict(self.policy_state),
            "critic_optimizer": optimizer_to_dict(self.critic_state),
            "lagrange": dataclasses.asdict(self.lagrange),
            "rng": rng_to_dict(self.rng),
            "log_rows": self.log.rows,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.epoch = int(state["epoch"])
        self.counter = InteractionCounter(int(state["interactions"]))
        self.policy = policy_from_dict(state["policy"])
        self.critics = critics_from_dict(state["critics"])
        self.policy_state = optimizer_from_dict(state["policy_optimizer"])
        self.critic_state = optimizer_from_dict(state["critic_optimizer"])
        self.lagrange = LagrangeState(**state["lagrange"])
        self.rng = rng_from_dict(state["rng"])
        self.log = RunLog.from_rows(state["log_rows"])

    def save(self, path: Path | str) -> Path:
        return save_checkpoint(path, self.kind, self.state_dict())

    def resume(self, path: Path | str) -> None:
        self.load_state_dict(load_checkpoint(path, self.kind))
        logger.info(f"Reprise depuis {path} (époque {self.epoch}, {self.counter.value} interactions)")


def train_model_free(env: CmdpEnv, config: RunConfig, seed: int) -> Tuple[RunLog, PPOLagrangianTrainer]:
    """Entraîne PPO ou PPO-Lagrangian jusqu'au budget d'interactions."""
    trainer = PPOLagrangianTrainer(env, config, seed)
    trainer.run()
    return trainer.log, trainer
