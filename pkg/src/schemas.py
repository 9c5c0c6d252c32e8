from __future__ import annotations

import math
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


AGENTS = ("ppo", "ppo_lagrangian", "mbppo_lagrangian")
AgentKind = Literal["ppo", "ppo_lagrangian", "mbppo_lagrangian"]


class StrictModel(BaseModel):
    """Base des sections de configuration : clés inconnues refusées."""

    model_config = ConfigDict(extra="forbid")


class EnvConfig(StrictModel):
    """Choix et paramètres de l'environnement."""

    name: str = "hazard_goal_2d"
    horizon: int = Field(200, gt=0)
    params: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known_env(cls, value: str) -> str:
        from src.cmdp_env import ENV_REGISTRY

        if value not in ENV_REGISTRY:
            raise ValueError(f"environnement inconnu: {value} (disponibles: {sorted(ENV_REGISTRY)})")
        return value


class PpoConfig(StrictModel):
    """Acteur, critiques et multiplicateur de Lagrange."""

    actor_hidden: Tuple[int, ...] = (64, 64)
    critic_hidden: Tuple[int, ...] = (64, 64)
    init_scheme: Literal["uniform_fan_in", "orthogonal"] = "uniform_fan_in"
    actor_lr: float = Field(3e-4, gt=0)
    critic_lr: float = Field(1e-3, gt=0)
    lambda_lr: float = Field(5e-2, gt=0)
    lambda_init: float = Field(1.0, ge=0)
    gae_lambda: float = Field(0.95, ge=0, le=1)
    clip_epsilon: float = Field(0.2, gt=0, lt=1)
    update_epochs: int = Field(40, gt=0)
    minibatch_size: Optional[int] = Field(None, gt=0)
    target_kl: Optional[float] = Field(None, gt=0)
    init_log_std: float = math.log(0.6)
    normalize_loss: bool = True
    episodes_per_epoch: int = Field(10, gt=0)


class EnsembleConfig(StrictModel):
    """Ensemble de modèles de dynamique gaussiens."""

    n_members: int = Field(8, ge=2)
    n_elites: int = Field(6, ge=1)
    hidden: Tuple[int, ...] = (200, 200, 200, 200)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(256, gt=0)
    max_epochs: int = Field(100, gt=0)
    patience: int = Field(5, gt=0)
    validation_fraction: float = Field(0.1, gt=0, lt=1)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_elites(self) -> "EnsembleConfig":
        if self.n_elites > self.n_members:
            raise ValueError(f"n_elites ({self.n_elites}) > n_members ({self.n_members})")
        return self


class MbppoConfig(StrictModel):
    """Boucle basée modèle : horizon tronqué, seuil PR, β, mélange réel/imaginaire."""

    horizon: int = Field(80, gt=0)
    episodes_per_collection: int = Field(10, gt=0)
    imaginary_episodes: int = Field(100, gt=0)
    pr_threshold: float = Field(0.66, ge=0, le=1)
    beta: float = Field(0.02, ge=0, le=1)
    real_fraction: float = Field(0.05, ge=0, le=1)
    pr_episodes: int = Field(5, gt=0)
    max_inner_passes: int = Field(20, gt=0)


class RunConfig(StrictModel):
    """Configuration complète d'une expérience (toutes les sections ont des valeurs par défaut)."""

    agent: AgentKind = "mbppo_lagrangian"
    env: EnvConfig = Field(default_factory=EnvConfig)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    budget: int = Field(100_000, gt=0)
    gamma: float = Field(0.99, gt=0, lt=1)
    cost_limit: float = Field(5.0, gt=0)
    output_dir: str = "runs"
    workers: int = Field(1, ge=1)
    collection_workers: int = Field(1, ge=1)
    memory_limit_gb: float = Field(8.0, gt=0)
    ppo: PpoConfig = Field(default_factory=PpoConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    mbppo: MbppoConfig = Field(default_factory=MbppoConfig)

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, seeds: List[int]) -> List[int]:
        if not seeds:
            raise ValueError("au moins une graine est requise")
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"graines en double: {seeds}")
        return seeds

    @model_validator(mode="after")
    def _check_model_horizon(self) -> "RunConfig":
        if self.agent == "mbppo_lagrangian" and not self.mbppo.horizon < self.env.horizon:
            raise ValueError(f"l'horizon du modèle H={self.mbppo.horizon} doit être < T={self.env.horizon}")
        return self


class RunMetadata(BaseModel):
    """Métadonnées écrites à côté de la configuration figée."""

    seed: int
    agent: str
    env: str
    init_scheme: str
    csv_schema_version: int
    versions: Dict[str, str]


class SeedSummary(BaseModel):
    """Résumé JSON d'une graine."""

    seed: int
    agent: str
    env: str
    epochs: int
    interactions: int
    final_reward_return: float
    final_cost_return: float
    cost_limit: float
    feasible: bool
    cumulative_violations: int
    convergence_epoch: Optional[int] = None


class MetricAggregate(BaseModel):
    """Valeurs par graine et statistiques d'une métrique."""

    per_seed: Dict[str, float]
    mean: float
    median: float


class AggregateSummary(BaseModel):
    """Agrégat inter-graines écrit en tête du répertoire d'expérience."""

    agent: str
    env: str
    seeds: List[int]
    failed_seeds: List[int] = Field(default_factory=list)
    metrics: Dict[str, MetricAggregate]
    baseline: Optional[Dict[str, Any]] = None


class PairedComparison(BaseModel):
    """Comparaison appariée modèle / sans modèle pour une graine."""

    seed: int
    target_reward: float
    model_based_interactions: Optional[int] = None
    model_free_interactions: Optional[int] = None
    interaction_ratio: Optional[float] = None
    model_based_violations: Optional[int] = None
    model_free_violations: Optional[int] = None
    violation_ratio: Optional[float] = None


class BetaSweepResult(BaseModel):
    """Coût convergé moyen par β et corrélation de rang."""

    betas: List[float]
    mean_cost_returns: List[float]
    spearman: float
