"""
Orchestration des expériences et métriques.

- Chargement de configuration (fichier JSON + surcharges en ligne de commande)
- Exécution multi-graines des trois agents (ppo, ppo_lagrangian, mbppo_lagrangian)
- Violations cumulées, normalisation par la référence PPO non contrainte
- Agrégats inter-graines, comparaison à récompense égale, balayage de β
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import psutil
from scipy.stats import spearmanr

from src.cmdp_env import CmdpEnv, make_env
from src.exceptions import ExperimentFailed, MbppoError, MissingBaselineError, TrainingAborted
from src.lagrangian_ppo import PPOLagrangianTrainer
from src.log_store import RunLogStore
from src.mbppo import MBPPOLagrangian
from src.rollouts import InteractionCounter, collect_real
from src.run_log import CSV_SCHEMA_VERSION, RunLog
from src.schemas import (
    AggregateSummary,
    BetaSweepResult,
    MetricAggregate,
    PairedComparison,
    RunConfig,
    RunMetadata,
    SeedSummary,
)


logger = logging.getLogger(__name__)

FINAL_WINDOW = 10
CONVERGENCE_WINDOW = 10
CONVERGENCE_TOLERANCE = 0.02
CONVERGENCE_PATIENCE = 20
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "gymnasium", "duckdb", "psutil")


# -------------------------------------------------------------------------
# Configuration
# -------------------------------------------------------------------------
def load_config(path: Optional[Path | str] = None, **overrides: Any) -> RunConfig:
    """
    Charge une configuration JSON ; les surcharges non nulles priment sur le fichier.

    `seed` remplace la liste de graines par une seule graine, `env` remplace
    le nom de l'environnement. Les variables d'environnement ne sont jamais lues.

    Raises:
        pydantic.ValidationError: Clé inconnue ou valeur invalide
    """
    data: Dict[str, Any] = {}
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    seed = overrides.pop("seed", None)
    env_name = overrides.pop("env", None)
    if seed is not None:
        data["seeds"] = [int(seed)]
    if env_name is not None:
        data.setdefault("env", {})["name"] = env_name
    data.update({key: value for key, value in overrides.items() if value is not None})
    return RunConfig.model_validate(data)


def build_env(config: RunConfig) -> CmdpEnv:
    return make_env(config.env.name, horizon=config.env.horizon, gamma=config.gamma, **config.env.params)


def library_versions() -> Dict[str, str]:
    versions = {}
    for package in TRACKED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "inconnue"
    return versions


def _check_memory_usage(limit_gb: float, context: str) -> float:
    """Mémoire résidente du processus en Go, avertissement au-delà de la limite."""
    used_gb = psutil.Process().memory_info().rss / (1024 ** 3)
    if used_gb > limit_gb:
        logger.warning(f"⚠️ Mémoire élevée ({context}): {used_gb:.2f} Go > {limit_gb:.1f} Go")
    else:
        logger.info(f"💾 Mémoire ({context}): {used_gb:.2f} Go")
    return used_gb


# -------------------------------------------------------------------------
# Métriques
# -------------------------------------------------------------------------
def cumulative_violations(log: RunLog | Sequence[int]) -> np.ndarray:
    """Cumul courant des pas réels de coût 1 (les pas imaginaires n'y figurent jamais)."""
    per_epoch = log.column("violations") if isinstance(log, RunLog) else np.asarray(log)
    return np.cumsum(np.asarray(per_epoch, dtype=np.int64))


def normalize_against_baseline(series: Sequence[float], baseline: Optional[float], required_run: str = "ppo") -> np.ndarray:
    """
    Division terme à terme par la valeur de référence.

    Raises:
        MissingBaselineError: Référence absente ou non strictement positive
    """
    if baseline is None or not math.isfinite(baseline):
        raise MissingBaselineError(required_run)
    if baseline <= 0:
        raise MissingBaselineError(required_run, reason=f"valeur de référence {baseline} <= 0")
    return np.asarray(series, dtype=np.float64) / baseline


def convergence_epoch(
    rewards: Sequence[float],
    window: int = CONVERGENCE_WINDOW,
    tolerance: float = CONVERGENCE_TOLERANCE,
    patience: int = CONVERGENCE_PATIENCE,
) -> Optional[int]:
    """
    Première époque après laquelle la moyenne glissante (10 époques) de la
    récompense varie de moins de 2 % pendant 20 époques consécutives.

    Returns:
        Indice de l'époque, ou None (budget épuisé avant convergence)
    """
    moving = pd.Series(np.asarray(rewards, dtype=np.float64)).rolling(window, min_periods=1).mean().to_numpy()
    if len(moving) <= patience:
        return None
    previous = moving[:-1]
    change = np.abs(np.diff(moving)) / np.maximum(np.abs(previous), 1e-8)
    stable = change < tolerance
    # stable[k] concerne le passage de l'époque k à k+1
    for epoch in range(len(stable) - patience + 1):
        if np.all(stable[epoch:epoch + patience]):
            return epoch
    return None


def per_outer_epoch(log: RunLog, column: str) -> np.ndarray:
    """Dernière valeur de `column` par époque externe (les passes internes répètent la collecte)."""
    if not len(log):
        return np.array([], dtype=np.float64)
    return log.to_frame().groupby("outer_epoch", sort=True)[column].last().to_numpy(dtype=np.float64)


def final_mean(log: RunLog, column: str, window: int = FINAL_WINDOW) -> float:
    values = per_outer_epoch(log, column)
    return float(np.mean(values[-window:])) if len(values) else math.nan


def summarize(log: RunLog, config: RunConfig, seed: int) -> SeedSummary:
    final_cost = final_mean(log, "cost_return")
    return SeedSummary(
        seed=seed,
        agent=config.agent,
        env=config.env.name,
        epochs=len(log),
        interactions=log.interactions,
        final_reward_return=final_mean(log, "reward_return"),
        final_cost_return=final_cost,
        cost_limit=config.cost_limit,
        feasible=bool(final_cost <= config.cost_limit),
        cumulative_violations=log.cumulative_violations,
        convergence_epoch=convergence_epoch(per_outer_epoch(log, "reward_return")),
    )


# -------------------------------------------------------------------------
# Exécution
# -------------------------------------------------------------------------
def make_trainer(env: CmdpEnv, config: RunConfig, seed: int) -> PPOLagrangianTrainer | MBPPOLagrangian:
    if config.agent == "mbppo_lagrangian":
        return MBPPOLagrangian(env, config, seed)
    return PPOLagrangianTrainer(env, config, seed)


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")


def run_seed(config: RunConfig, seed: int, resume: bool = False) -> SeedSummary:
    """
    Entraîne une graine et écrit ses artefacts dans `<output_dir>/seed_<seed>/` :
    progress.csv, timings.csv, config.json, metadata.json, summary.json,
    checkpoint.json (et abort_snapshot.json en cas d'arrêt).
    """
    seed_dir = Path(config.output_dir) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    (seed_dir / "config.json").write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    run_metadata = RunMetadata(
        seed=seed,
        agent=config.agent,
        env=config.env.name,
        init_scheme=config.ppo.init_scheme,
        csv_schema_version=CSV_SCHEMA_VERSION,
        versions=library_versions(),
    )
    (seed_dir / "metadata.json").write_text(run_metadata.model_dump_json(indent=2) + "\n", encoding="utf-8")

    env = build_env(config)
    trainer = make_trainer(env, config, seed)
    checkpoint = seed_dir / "checkpoint.json"
    if resume and checkpoint.exists():
        trainer.resume(checkpoint)

    logger.info(f"🚀 Graine {seed}: {config.agent} sur {config.env.name}, budget {config.budget}")
    started = time.perf_counter()
    try:
        trainer.run(checkpoint_path=checkpoint)
    except TrainingAborted as exc:
        _write_json(seed_dir / "abort_snapshot.json", exc.snapshot)
        logger.error(f"❌ Graine {seed} interrompue: {exc}")
        raise
    finally:
        trainer.log.write_csv(seed_dir / "progress.csv", seed_dir / "timings.csv")

    summary = summarize(trainer.log, config, seed)
    (seed_dir / "summary.json").write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    _check_memory_usage(config.memory_limit_gb, f"graine {seed}")
    logger.info(
        f"✅ Graine {seed} terminée en {time.perf_counter() - started:.1f}s: "
        f"J^R={summary.final_reward_return:.3f} J^C={summary.final_cost_return:.3f} "
        f"violations={summary.cumulative_violations}"
    )
    return summary


def _run_seed_job(config_payload: Dict[str, Any], seed: int, resume: bool) -> Dict[str, Any]:
    # point d'entrée picklable pour les processus
    return run_seed(RunConfig.model_validate(config_payload), seed, resume=resume).model_dump()


def run_experiment(config: RunConfig, resume: bool = False) -> Path:
    """
    Exécute toutes les graines (en parallèle si workers > 1) puis agrège.

    Raises:
        ExperimentFailed: Au moins une graine en échec ; les résultats
            partiels et failures.json sont conservés
    """
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    failures: List[Dict[str, Any]] = []

    if config.workers > 1 and len(config.seeds) > 1:
        payload = config.model_dump()
        with ProcessPoolExecutor(max_workers=min(config.workers, len(config.seeds))) as executor:
            futures = {seed: executor.submit(_run_seed_job, payload, seed, resume) for seed in config.seeds}
            for seed, future in futures.items():
                try:
                    future.result()
                except Exception as exc:
                    logger.error(f"❌ Graine {seed} en échec ({type(exc).__name__}): {exc}")
                    failures.append({"seed": seed, "error": str(exc), "type": type(exc).__name__})
    else:
        for seed in config.seeds:
            try:
                run_seed(config, seed, resume=resume)
            except Exception as exc:
                if not isinstance(exc, MbppoError):
                    logger.exception(f"❌ Graine {seed}: erreur inattendue")
                failures.append({"seed": seed, "error": str(exc), "type": type(exc).__name__})

    failures_path = output_dir / "failures.json"
    if failures:
        _write_json(failures_path, failures)
    elif failures_path.exists():
        failures_path.unlink()
    aggregate(output_dir)
    if failures:
        raise ExperimentFailed(failures, str(output_dir))
    return output_dir


# -------------------------------------------------------------------------
# Agrégation et référence
# -------------------------------------------------------------------------
def load_summaries(experiment_dir: Path | str) -> List[SeedSummary]:
    paths = sorted(Path(experiment_dir).glob("seed_*/summary.json"))
    return sorted(
        (SeedSummary.model_validate_json(p.read_text(encoding="utf-8")) for p in paths),
        key=lambda s: s.seed,
    )


def aggregate(experiment_dir: Path | str) -> AggregateSummary:
    """
    Écrit aggregate.json (valeurs par graine, moyenne, médiane) et importe
    les journaux dans la base DuckDB `runs.duckdb` du répertoire.
    """
    experiment_dir = Path(experiment_dir)
    summaries = load_summaries(experiment_dir)
    failed: List[int] = []
    failures_path = experiment_dir / "failures.json"
    if failures_path.exists():
        failed = [int(f["seed"]) for f in json.loads(failures_path.read_text(encoding="utf-8"))]

    frame = pd.DataFrame([s.model_dump() for s in summaries])
    metrics: Dict[str, MetricAggregate] = {}
    if not frame.empty:
        frame["feasible"] = frame["feasible"].astype(float)
        for column in ("final_reward_return", "final_cost_return", "cumulative_violations", "interactions", "feasible"):
            metrics[column] = MetricAggregate(
                per_seed={str(seed): float(value) for seed, value in zip(frame["seed"], frame[column])},
                mean=float(frame[column].mean()),
                median=float(frame[column].median()),
            )

    with RunLogStore(experiment_dir / "runs.duckdb") as store:
        store.import_experiment(experiment_dir)
        store.get_statistics()

    result = AggregateSummary(
        agent=summaries[0].agent if summaries else "inconnu",
        env=summaries[0].env if summaries else "inconnu",
        seeds=[s.seed for s in summaries],
        failed_seeds=failed,
        metrics=metrics,
    )
    (experiment_dir / "aggregate.json").write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"📊 Agrégat écrit: {experiment_dir / 'aggregate.json'} ({len(summaries)} graines)")
    return result


def load_baseline(baseline_dir: Path | str) -> Tuple[float, Dict[str, Any]]:
    """
    Valeur de référence : violations cumulées moyennes d'un run PPO non contraint.

    Raises:
        MissingBaselineError: Répertoire, agrégat ou agent inadéquat
    """
    baseline_dir = Path(baseline_dir)
    required = f"ppo ({baseline_dir})"
    path = baseline_dir / "aggregate.json"
    if not path.exists():
        raise MissingBaselineError(required)
    summary = AggregateSummary.model_validate_json(path.read_text(encoding="utf-8"))
    if summary.agent != "ppo":
        raise MissingBaselineError(required, reason=f"agent '{summary.agent}' au lieu de 'ppo'")
    if "cumulative_violations" not in summary.metrics:
        raise MissingBaselineError(required, reason="aucune graine terminée")
    value = summary.metrics["cumulative_violations"].mean
    provenance = {"baseline_dir": str(baseline_dir), "agent": summary.agent, "env": summary.env,
                  "seeds": summary.seeds, "value": value}
    return value, provenance


def baseline_normalize(experiment_dir: Path | str, baseline_dir: Path | str) -> Dict[str, Any]:
    """
    Normalise les violations cumulées de chaque graine par la référence PPO ;
    écrit `normalized_violations.csv` par graine et `baseline.json` (provenance).
    """
    experiment_dir = Path(experiment_dir)
    value, provenance = load_baseline(baseline_dir)
    finals: Dict[str, float] = {}
    for seed_dir in sorted(experiment_dir.glob("seed_*")):
        progress = seed_dir / "progress.csv"
        if not progress.exists():
            continue
        log = RunLog.read_csv(progress)
        normalized = normalize_against_baseline(cumulative_violations(log), value, provenance["baseline_dir"])
        pd.DataFrame({
            "epoch": log.column("epoch").astype(np.int64),
            "interactions": log.column("interactions").astype(np.int64),
            "normalized_cumulative_violations": normalized,
        }).to_csv(seed_dir / "normalized_violations.csv", index=False, float_format="%.10g", lineterminator="\n")
        finals[seed_dir.name] = float(normalized[-1]) if len(normalized) else 0.0
    result = {"baseline": provenance, "final_normalized_violations": finals}
    _write_json(experiment_dir / "baseline.json", result)
    return result


# -------------------------------------------------------------------------
# Comparaisons
# -------------------------------------------------------------------------
def _first_reaching(log: RunLog, target: float, window: int = 5) -> Optional[int]:
    smoothed = pd.Series(log.column("reward_return").astype(float)).rolling(window, min_periods=1).mean()
    hits = np.flatnonzero(smoothed.to_numpy() >= target)
    return int(hits[0]) if len(hits) else None


def matched_stopping_point(model_based: RunLog, model_free: RunLog, seed: int, fraction: float = 0.8) -> PairedComparison:
    """
    Interactions réelles et violations cumulées de chaque agent au moment où sa
    récompense (moyenne glissante) atteint `fraction` de la récompense finale
    du modèle sans modèle.
    """
    target = fraction * final_mean(model_free, "reward_return")
    result = PairedComparison(seed=seed, target_reward=target)
    mb_row, mf_row = _first_reaching(model_based, target), _first_reaching(model_free, target)
    if mb_row is not None:
        result.model_based_interactions = int(model_based.column("interactions")[mb_row])
        result.model_based_violations = int(model_based.column("cumulative_violations")[mb_row])
    if mf_row is not None:
        result.model_free_interactions = int(model_free.column("interactions")[mf_row])
        result.model_free_violations = int(model_free.column("cumulative_violations")[mf_row])
    if mb_row is not None and mf_row is not None:
        result.interaction_ratio = result.model_based_interactions / max(result.model_free_interactions, 1)
        result.violation_ratio = result.model_based_violations / max(result.model_free_violations, 1)
    return result


def compare(model_based_dir: Path | str, model_free_dir: Path | str, fraction: float = 0.8) -> List[PairedComparison]:
    """Comparaisons appariées par graine ; écrit comparison.json dans le répertoire basé modèle."""
    model_based_dir, model_free_dir = Path(model_based_dir), Path(model_free_dir)
    results = []
    for mb_progress in sorted(model_based_dir.glob("seed_*/progress.csv")):
        seed_name = mb_progress.parent.name
        mf_progress = model_free_dir / seed_name / "progress.csv"
        if not mf_progress.exists():
            logger.warning(f"Pas de graine appariée pour {seed_name} dans {model_free_dir}")
            continue
        results.append(matched_stopping_point(
            RunLog.read_csv(mb_progress), RunLog.read_csv(mf_progress),
            seed=int(seed_name.split("_", 1)[1]), fraction=fraction,
        ))
    _write_json(model_based_dir / "comparison.json", [r.model_dump() for r in results])
    efficient = sum(1 for r in results if r.interaction_ratio is not None and r.interaction_ratio <= 0.5)
    safer = sum(1 for r in results if r.violation_ratio is not None and r.violation_ratio <= 0.7)
    logger.info(f"Comparaison: {efficient}/{len(results)} graines à <= 1/2 des interactions, "
                f"{safer}/{len(results)} à <= 0.7 des violations")
    return results


def beta_sweep(config: RunConfig, betas: Sequence[float], output_dir: Path | str) -> BetaSweepResult:
    """
    Une expérience MBPPO-Lagrangian par β ; corrélation de Spearman entre β
    et le coût convergé moyen.
    """
    output_dir = Path(output_dir)
    costs = []
    with RunLogStore(output_dir / "sweep.duckdb") as store:
        for beta in betas:
            label = f"beta_{beta:g}"
            sub = config.model_copy(update={
                "agent": "mbppo_lagrangian",
                "output_dir": str(output_dir / label),
                "mbppo": config.mbppo.model_copy(update={"beta": float(beta)}),
            })
            run_experiment(sub)
            store.import_experiment(output_dir / label, run_label=label)
        metrics = store.final_metrics()
        for beta in betas:
            rows = metrics[metrics["run_label"] == f"beta_{beta:g}"]
            costs.append(float(rows["final_cost_return"].mean()))
    rho = spearmanr(list(betas), costs).statistic if len(betas) > 1 else math.nan
    result = BetaSweepResult(betas=list(map(float, betas)), mean_cost_returns=costs, spearman=float(rho))
    (output_dir / "beta_sweep.json").write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Balayage de β: coûts {np.round(costs, 3).tolist()}, Spearman {result.spearman:.3f}")
    return result


class UniformRandomPolicy:
    """Actions uniformes dans [-1, 1]^dim."""

    def __init__(self, action_dim: int) -> None:
        self.action_dim = action_dim

    def sample(self, observation: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        return rng.uniform(-1.0, 1.0, size=self.action_dim), 0.0


def random_policy_baseline(env: CmdpEnv, episodes: int, seed: int) -> Dict[str, float]:
    """Retours moyens d'une politique uniforme, mesurés dans le dépôt."""
    collection = collect_real(
        env, UniformRandomPolicy(env.cmdp_spec.action_dim), env.cmdp_spec.horizon, episodes,
        np.random.default_rng(seed), InteractionCounter(),
    )
    stats = collection.stats
    return {
        "reward_return": stats.mean("reward_returns"),
        "cost_return": stats.mean("cost_returns"),
        "episode_reward": stats.mean("episode_rewards"),
        "violations": float(stats.total_violations),
    }
