"""
MBPPO-Lagrangian : PPO-Lagrangian entraîné sur des rollouts imaginaires.

Boucle externe : collecte réelle -> (ré)entraînement de l'ensemble.
Boucle interne (ensemble figé), répétée tant que le Performance Ratio
dépasse le seuil :
    rollouts imaginaires de H pas -> J^C estimé -> mise à jour de λ avec β d
    -> K passes acteur/critiques -> calcul du PR

Le premier passage après chaque réentraînement mélange des fenêtres
d'épisodes réels (5 %) aux épisodes imaginaires (95 %).
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.checkpoints import load_checkpoint, rng_from_dict, rng_to_dict, save_checkpoint
from src.cmdp_env import CmdpEnv
from src.diffnum import adam_init, optimizer_from_dict, optimizer_to_dict, value_of
from src.dynamics_model import (
    DynamicsEnsemble,
    TransitionDataset,
    ensemble_from_dict,
    ensemble_to_dict,
    init_ensemble,
    model_rollout,
    performance_ratio,
    train_ensemble,
)
from src.estimation import Episode, build_batch, init_critics
from src.exceptions import DatasetTooSmallError, NumericError, TrainingAborted
from src.lagrangian_ppo import (
    GaussianPolicy,
    LagrangeState,
    critics_from_dict,
    critics_to_dict,
    init_policy,
    policy_from_dict,
    policy_to_dict,
    ppo_update,
    update_lambda,
)
from src.rollouts import CollectionStats, InteractionCounter, collect_real
from src.run_log import RunLog
from src.schemas import RunConfig


logger = logging.getLogger(__name__)

__all__ = [
    "ImaginaryBatch",
    "MBPPOLagrangian",
    "collect_real",
    "estimate_sample_cost",
    "imaginary_rollout",
    "mix_first_pass",
    "train_model_based",
]


@dataclass(eq=False)
class ImaginaryBatch:
    """Épisodes de H pas générés dans l'ensemble, partant d'états tirés de μ."""

    episodes: List[Episode]

    def __len__(self) -> int:
        return len(self.episodes)


def imaginary_rollout(
    ensemble: DynamicsEnsemble,
    policy: GaussianPolicy,
    env: CmdpEnv,
    initial_states: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    deterministic: bool = False,
) -> ImaginaryBatch:
    """
    Rollouts tronqués dans le modèle ; récompenses et coûts sont calculés
    analytiquement à partir des états prédits. Pas de prédicat terminal :
    chaque épisode fait exactement `horizon` pas.
    """
    rollout = model_rollout(ensemble, policy, initial_states, horizon, rng, deterministic=deterministic)
    before, after = rollout.states[:, :-1], rollout.states[:, 1:]
    rewards = np.asarray(env.reward_fn(before, rollout.applied_actions, after), dtype=np.float64)
    costs = np.asarray(env.cost_fn(before, rollout.applied_actions, after), dtype=np.float64)
    episodes = [
        Episode(
            observations=rollout.states[i],
            actions=rollout.actions[i],
            rewards=rewards[i],
            costs=costs[i],
            log_probs=rollout.log_probs[i],
            terminated=False,
            provenance="imaginary",
        )
        for i in range(len(rollout.states))
    ]
    return ImaginaryBatch(episodes)


def estimate_sample_cost(episodes: ImaginaryBatch | Sequence[Episode], gamma: float) -> float:
    """J^C_sample = (1/|E|) Σ_episodes Σ_{p=0}^{H-1} γ^p c_{p+1}."""
    items = episodes.episodes if isinstance(episodes, ImaginaryBatch) else list(episodes)
    if not items:
        raise ValueError("aucun épisode pour estimer le coût")
    return float(np.mean([np.sum(ep.costs * gamma ** np.arange(ep.length)) for ep in items]))


def real_windows(episodes: Sequence[Episode], horizon: int) -> List[Episode]:
    """Découpe les épisodes réels en fenêtres consécutives d'au plus H pas."""
    return [ep.window(start, horizon) for ep in episodes for start in range(0, ep.length, horizon)]


def mix_first_pass(
    real_episodes: Sequence[Episode],
    imaginary: ImaginaryBatch,
    real_fraction: float,
    horizon: int,
    rng: np.random.Generator,
    total: Optional[int] = None,
) -> List[Episode]:
    """
    Mélange, en nombre d'épisodes, des fenêtres réelles de H pas et des
    épisodes imaginaires ; les étiquettes de provenance sont conservées.

    Args:
        real_fraction: Part d'épisodes réels dans [0, 1]
        total: Nombre total d'épisodes (défaut : taille du lot imaginaire)
    """
    if not 0.0 <= real_fraction <= 1.0:
        raise ValueError(f"real_fraction doit être dans [0, 1], reçu {real_fraction}")
    total = len(imaginary) if total is None else total
    n_real = int(round(real_fraction * total))
    windows = real_windows(real_episodes, horizon)
    if n_real > len(windows):
        logger.warning(f"{len(windows)} fenêtres réelles disponibles pour {n_real} demandées")
        n_real = len(windows)
    n_imaginary = min(total - n_real, len(imaginary))
    chosen = sorted(rng.choice(len(windows), size=n_real, replace=False).tolist()) if n_real else []
    return [windows[i] for i in chosen] + imaginary.episodes[:n_imaginary]


class MBPPOLagrangian:
    """Orchestrateur de la boucle basée modèle, avec reprise exacte par checkpoint."""

    kind = "model_based"

    def __init__(self, env: CmdpEnv, config: RunConfig, seed: int) -> None:
        self.env = env
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        spec = env.cmdp_spec
        ppo = config.ppo
        self.policy = init_policy(
            spec.obs_dim, spec.action_dim, ppo.actor_hidden, self.rng,
            init_log_std=ppo.init_log_std, scheme=ppo.init_scheme,
        )
        self.critics = init_critics(spec.obs_dim, ppo.critic_hidden, self.rng, scheme=ppo.init_scheme)
        self.policy_state = adam_init(self.policy, ppo.actor_lr)
        self.critic_state = adam_init(self.critics, ppo.critic_lr)
        self.lagrange = LagrangeState(lam=ppo.lambda_init, d=config.cost_limit, beta=config.mbppo.beta, lr=ppo.lambda_lr)
        self.ensemble = init_ensemble(spec.obs_dim, spec.action_dim, config.ensemble, self.rng, scheme=ppo.init_scheme)
        self.dataset: Optional[TransitionDataset] = None
        self.counter = InteractionCounter()
        self.log = RunLog()
        self.outer_epoch = 0

    # ------------------------------
    # Boucle
    # ------------------------------
    def snapshot(self, reason: str) -> Dict[str, Any]:
        return {
            "reason": reason,
            "seed": self.seed,
            "outer_epoch": self.outer_epoch,
            "interactions": self.counter.value,
            "lagrange_multiplier": self.lagrange.lam,
            "dataset_size": 0 if self.dataset is None else len(self.dataset),
            "validation_nll": None if self.ensemble.validation_nll is None else self.ensemble.validation_nll.tolist(),
            "log_std": value_of(self.policy.log_std).tolist(),
            "last_rows": self.log.rows[-3:],
        }

    def _append_row(self, stats: CollectionStats, violations: int, started: float, **extra: Any) -> Dict[str, Any]:
        return self.log.append(
            outer_epoch=self.outer_epoch,
            interactions=self.counter.value,
            reward_return=stats.mean("reward_returns"),
            cost_return=stats.mean("cost_returns"),
            episode_reward=stats.mean("episode_rewards"),
            episode_cost=stats.mean("episode_costs"),
            lagrange_multiplier=self.lagrange.lam,
            violations=violations,
            wall_clock_seconds=time.perf_counter() - started,
            **extra,
        )

    def outer_step(self) -> None:
        """Une époque externe : collecte, réentraînement, boucle interne gardée par le PR."""
        started = time.perf_counter()
        cfg, mb = self.config, self.config.mbppo
        collection = collect_real(
            self.env, self.policy, self.env.cmdp_spec.horizon, mb.episodes_per_collection,
            self.rng, self.counter, workers=cfg.collection_workers,
        )
        stats = collection.stats
        self.dataset = (
            TransitionDataset.from_transitions(collection.transitions)
            if self.dataset is None
            else self.dataset.extend(collection.transitions)
        )

        try:
            self.ensemble = train_ensemble(self.ensemble, self.dataset, cfg.ensemble, self.rng)
        except DatasetTooSmallError as exc:
            logger.warning(f"Graine {self.seed}: {exc}, nouvelle collecte avant entraînement du modèle")
            self._append_row(stats, stats.total_violations, started, phase="collect")
            self.outer_epoch += 1
            return
        except NumericError as exc:
            raise TrainingAborted(f"graine {self.seed}: échec de l'ensemble: {exc}", snapshot=self.snapshot(str(exc))) from exc

        pending_violations = stats.total_violations
        for inner in range(mb.max_inner_passes):
            try:
                starts = np.vstack([self.env.sample_initial_state(self.rng) for _ in range(mb.imaginary_episodes)])
                imaginary = imaginary_rollout(self.ensemble, self.policy, self.env, starts, mb.horizon, self.rng)
                sample_cost = estimate_sample_cost(imaginary, cfg.gamma)
                self.lagrange = update_lambda(self.lagrange, sample_cost)
                episodes = (
                    mix_first_pass(collection.episodes, imaginary, mb.real_fraction, mb.horizon, self.rng)
                    if inner == 0
                    else imaginary.episodes
                )
                batch = build_batch(episodes, self.critics, cfg.gamma, cfg.ppo.gae_lambda)
                previous_policy = self.policy
                result = ppo_update(
                    self.policy, self.critics, batch, self.policy_state, self.critic_state,
                    self.lagrange.lam, cfg.ppo, self.rng,
                )
            except NumericError as exc:
                raise TrainingAborted(
                    f"graine {self.seed}, époque {self.outer_epoch}, passe {inner}: {exc}",
                    snapshot=self.snapshot(str(exc)),
                ) from exc
            self.policy, self.critics = result.policy, result.critics
            self.policy_state, self.critic_state = result.policy_state, result.critic_state

            ratio = performance_ratio(
                self.ensemble, self.policy, previous_policy, self.env, cfg.gamma,
                self.env.cmdp_spec.horizon, mb.pr_episodes, self.rng,
            )
            row = self._append_row(
                stats, pending_violations, started,
                phase="inner", performance_ratio=ratio, sample_cost=sample_cost,
            )
            pending_violations = 0
            logger.info(
                f"[mbppo] graine {self.seed} époque {self.outer_epoch} passe {inner}: "
                f"J^C_sample={sample_cost:.3f} λ={self.lagrange.lam:.4f} PR={ratio:.2f} "
                f"J^R réel={row['reward_return']:.3f} interactions={row['interactions']}"
            )
            if ratio <= mb.pr_threshold:
                break
            started = time.perf_counter()
        else:
            logger.info(f"Plafond de {mb.max_inner_passes} passes internes atteint, réentraînement du modèle")
        self.outer_epoch += 1

    def run(self, budget: Optional[int] = None, checkpoint_path: Optional[Path] = None) -> RunLog:
        budget = budget if budget is not None else self.config.budget
        while self.counter.value < budget:
            self.outer_step()
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        return self.log

    # ------------------------------
    # Reprise
    # ------------------------------
    def state_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "outer_epoch": self.outer_epoch,
            "interactions": self.counter.value,
            "policy": policy_to_dict(self.policy),
            "critics": critics_to_dict(self.critics),
            "policy_optimizer": optimizer_to_dict(self.policy_state),
            "critic_optimizer": optimizer_to_dict(self.critic_state),
            "lagrange": dataclasses.asdict(self.lagrange),
            "ensemble": ensemble_to_dict(self.ensemble),
            "rng": rng_to_dict(self.rng),
            "log_rows": self.log.rows,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.outer_epoch = int(state["outer_epoch"])
        self.counter = InteractionCounter(int(state["interactions"]))
        self.policy = policy_from_dict(state["policy"])
        self.critics = critics_from_dict(state["critics"])
        self.policy_state = optimizer_from_dict(state["policy_optimizer"])
        self.critic_state = optimizer_from_dict(state["critic_optimizer"])
        self.lagrange = LagrangeState(**state["lagrange"])
        self.ensemble = ensemble_from_dict(state["ensemble"])
        self.rng = rng_from_dict(state["rng"])
        self.log = RunLog.from_rows(state["log_rows"])

    def save(self, path: Path | str) -> Path:
        """Checkpoint JSON + jeu de transitions réelles au format NPZ à côté."""
        path = Path(path)
        saved = save_checkpoint(path, self.kind, self.state_dict())
        if self.dataset is not None:
            np.savez(path.with_suffix(".npz"), states=self.dataset.states, actions=self.dataset.actions,
                     next_states=self.dataset.next_states)
        return saved

    def resume(self, path: Path | str) -> None:
        path = Path(path)
        self.load_state_dict(load_checkpoint(path, self.kind))
        data_path = path.with_suffix(".npz")
        if data_path.exists():
            with np.load(data_path) as data:
                self.dataset = TransitionDataset(data["states"], data["actions"], data["next_states"])
        logger.info(f"Reprise depuis {path} (époque {self.outer_epoch}, {self.counter.value} interactions)")


def train_model_based(env: CmdpEnv, config: RunConfig, seed: int) -> tuple[RunLog, MBPPOLagrangian]:
    """Entraîne MBPPO-Lagrangian jusqu'au budget d'interactions réelles."""
    trainer = MBPPOLagrangian(env, config, seed)
    trainer.run()
    return trainer.log, trainer
