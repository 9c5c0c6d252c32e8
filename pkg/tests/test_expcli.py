import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src import expcli
from src.cmdp_env import CircleTrack
from src.exceptions import ExperimentFailed, MissingBaselineError, TrainingAborted
from src.expcli import (
    aggregate,
    baseline_normalize,
    beta_sweep,
    compare,
    convergence_epoch,
    cumulative_violations,
    load_config,
    matched_stopping_point,
    normalize_against_baseline,
    random_policy_baseline,
    run_experiment,
    summarize,
)
from src.main import main
from src.run_log import RunLog
from src.schemas import AggregateSummary, MetricAggregate
from tests.test_run_log import filled_log


def make_log(rewards, interactions, violations) -> RunLog:
    log = RunLog()
    for epoch, (reward, count, violation) in enumerate(zip(rewards, interactions, violations)):
        log.append(
            outer_epoch=epoch, phase="inner", interactions=count, reward_return=reward, cost_return=0.0,
            episode_reward=reward, episode_cost=0.0, lagrange_multiplier=0.0, violations=violation,
        )
    return log


def write_baseline(directory, agent="ppo", value=200.0):
    directory.mkdir(parents=True, exist_ok=True)
    summary = AggregateSummary(
        agent=agent, env="hazard_goal_2d", seeds=[0],
        metrics={"cumulative_violations": MetricAggregate(per_seed={"0": value}, mean=value, median=value)},
    )
    (directory / "aggregate.json").write_text(summary.model_dump_json())
    return directory


# ------------------------------
# Configuration
# ------------------------------
def test_load_config_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"agent": "ppo", "seeds": [0, 1, 2], "env": {"name": "circle_track", "horizon": 50}}))
    config = load_config(path, seed=7, env="hazard_goal_2d", budget=1234, output_dir=None)
    assert config.seeds == [7]
    assert config.env.name == "hazard_goal_2d" and config.env.horizon == 50
    assert config.budget == 1234
    assert config.output_dir == "runs"


def test_load_config_without_file():
    assert load_config().agent == "mbppo_lagrangian"


# ------------------------------
# Métriques
# ------------------------------
def test_cumulative_violations_running_sum():
    np.testing.assert_array_equal(cumulative_violations([0, 2, 0, 1]), [0, 2, 2, 3])
    assert cumulative_violations(filled_log())[-1] == 3


def test_normalize_against_baseline():
    assert normalize_against_baseline([120.0], 200.0)[0] == pytest.approx(0.6)
    with pytest.raises(MissingBaselineError):
        normalize_against_baseline([1.0], None)
    with pytest.raises(MissingBaselineError):
        normalize_against_baseline([1.0], 0.0)


def test_convergence_epoch():
    assert convergence_epoch([5.0] * 30) == 0
    assert convergence_epoch([5.0] * 15) is None
    assert convergence_epoch(1.1 ** np.arange(60)) is None
    rewards = np.concatenate([np.linspace(0.0, 10.0, 20), np.full(40, 10.0)])
    epoch = convergence_epoch(rewards)
    assert epoch is not None and 20 <= epoch <= 40


# ------------------------------
# Exécution
# ------------------------------
def epoch_log(costs, inner_passes) -> RunLog:
    """Une ligne de collecte puis `inner_passes` lignes internes par époque externe."""
    log = RunLog()
    for epoch, (cost, passes) in enumerate(zip(costs, inner_passes)):
        for k in range(1 + passes):
            log.append(
                outer_epoch=epoch, phase="inner" if k else "collect", interactions=100 * (epoch + 1),
                reward_return=float(epoch), cost_return=cost, episode_reward=0.0, episode_cost=cost,
                lagrange_multiplier=0.0, violations=0,
            )
    return log


def test_summary_window_counts_outer_epochs(tiny_config):
    costs = [0.5] * 11 + [3.0]
    single = summarize(epoch_log(costs, [0] * 12), tiny_config, seed=0)
    repeated = summarize(epoch_log(costs, [1] * 11 + [8]), tiny_config, seed=0)
    # 10 dernières époques : 9 x 0.5 + 3.0
    assert single.final_cost_return == pytest.approx(0.75)
    assert repeated.final_cost_return == pytest.approx(0.75)
    assert single.final_reward_return == pytest.approx(6.5)
    assert repeated.final_reward_return == pytest.approx(6.5)
    assert single.feasible and repeated.feasible
    assert repeated.epochs == 11 * 2 + 9


def test_run_experiment_writes_artifacts(tiny_config):
    output = run_experiment(tiny_config)
    seed_dir = output / "seed_0"
    for name in ("progress.csv", "timings.csv", "config.json", "metadata.json", "summary.json", "checkpoint.json"):
        assert (seed_dir / name).exists(), name
    assert (output / "runs.duckdb").exists()
    summary = json.loads((output / "aggregate.json").read_text())
    assert summary["seeds"] == [0] and summary["failed_seeds"] == []
    assert set(summary["metrics"]) >= {"final_reward_return", "cumulative_violations", "feasible"}
    metadata = json.loads((seed_dir / "metadata.json").read_text())
    assert metadata["csv_schema_version"] == 1 and "numpy" in metadata["versions"]
    progress = pd.read_csv(seed_dir / "progress.csv")
    assert progress["interactions"].iloc[-1] >= tiny_config.budget


def test_reruns_are_byte_identical(tiny_config, tmp_path):
    first = run_experiment(tiny_config.model_copy(update={"output_dir": str(tmp_path / "a")}))
    second = run_experiment(tiny_config.model_copy(update={"output_dir": str(tmp_path / "b")}))
    assert (first / "seed_0" / "progress.csv").read_bytes() == (second / "seed_0" / "progress.csv").read_bytes()


def test_failed_seed_keeps_partial_results(tiny_config, monkeypatch):
    def abort(self, budget=None, checkpoint_path=None):
        raise TrainingAborted("perte non finie", snapshot={"epoch": 0, "lagrange_multiplier": 1.0})

    monkeypatch.setattr("src.expcli.PPOLagrangianTrainer.run", abort)
    with pytest.raises(ExperimentFailed) as info:
        run_experiment(tiny_config)
    output = Path(info.value.output_dir)
    failures = json.loads((output / "failures.json").read_text())
    assert failures[0]["seed"] == 0 and failures[0]["type"] == "TrainingAborted"
    snapshot = json.loads((output / "seed_0" / "abort_snapshot.json").read_text())
    assert snapshot["lagrange_multiplier"] == 1.0
    assert json.loads((output / "aggregate.json").read_text())["failed_seeds"] == [0]


def test_unexpected_error_fails_only_its_seed(tiny_config, monkeypatch):
    build = expcli.make_trainer

    def flaky(env, config, seed):
        if seed == 0:
            raise TypeError("argument inattendu")
        return build(env, config, seed)

    monkeypatch.setattr("src.expcli.make_trainer", flaky)
    with pytest.raises(ExperimentFailed) as info:
        run_experiment(tiny_config.model_copy(update={"seeds": [0, 1]}))
    output = Path(info.value.output_dir)
    failures = json.loads((output / "failures.json").read_text())
    assert failures == [{"seed": 0, "error": "argument inattendu", "type": "TypeError"}]
    assert (output / "seed_1" / "summary.json").exists()
    summary = json.loads((output / "aggregate.json").read_text())
    assert summary["seeds"] == [1] and summary["failed_seeds"] == [0]


def test_random_policy_baseline_is_reproducible():
    env = CircleTrack(horizon=30)
    first = random_policy_baseline(env, 3, seed=4)
    assert first == random_policy_baseline(env, 3, seed=4)
    assert set(first) == {"reward_return", "cost_return", "episode_reward", "violations"}


# ------------------------------
# Référence et comparaisons
# ------------------------------
def test_baseline_normalize(tmp_path):
    experiment = tmp_path / "exp"
    (experiment / "seed_0").mkdir(parents=True)
    filled_log().write_csv(experiment / "seed_0" / "progress.csv")
    result = baseline_normalize(experiment, write_baseline(tmp_path / "ppo"))
    assert result["final_normalized_violations"]["seed_0"] == pytest.approx(3 / 200)
    normalized = pd.read_csv(experiment / "seed_0" / "normalized_violations.csv")
    assert np.all(np.diff(normalized["normalized_cumulative_violations"]) >= 0)
    assert json.loads((experiment / "baseline.json").read_text())["baseline"]["value"] == 200.0


def test_baseline_requires_unconstrained_ppo(tmp_path):
    with pytest.raises(MissingBaselineError):
        baseline_normalize(tmp_path, tmp_path / "absent")
    with pytest.raises(MissingBaselineError):
        baseline_normalize(tmp_path, write_baseline(tmp_path / "lag", agent="ppo_lagrangian"))


def test_matched_stopping_point():
    model_free = make_log([10.0] * 12, [100 * (i + 1) for i in range(12)], [1] * 12)
    model_based = make_log([9.0] * 12, [10 * (i + 1) for i in range(12)], [0] * 12)
    result = matched_stopping_point(model_based, model_free, seed=0)
    assert result.target_reward == pytest.approx(8.0)
    assert (result.model_based_interactions, result.model_free_interactions) == (10, 100)
    assert result.interaction_ratio == pytest.approx(0.1)
    assert result.violation_ratio == 0.0


def test_matched_stopping_point_unreached():
    model_free = make_log([10.0] * 12, [100 * (i + 1) for i in range(12)], [1] * 12)
    model_based = make_log([1.0] * 12, [10 * (i + 1) for i in range(12)], [0] * 12)
    result = matched_stopping_point(model_based, model_free, seed=3)
    assert result.model_based_interactions is None and result.interaction_ratio is None
    assert result.model_free_interactions == 100


def test_compare_pairs_seeds(tmp_path):
    for name, rewards, step in (("mb", 9.0, 10), ("mf", 10.0, 100)):
        for seed in (0, 1):
            seed_dir = tmp_path / name / f"seed_{seed}"
            seed_dir.mkdir(parents=True)
            make_log([rewards] * 12, [step * (i + 1) for i in range(12)], [1] * 12).write_csv(seed_dir / "progress.csv")
    (tmp_path / "mb" / "seed_5").mkdir()
    make_log([1.0], [1], [0]).write_csv(tmp_path / "mb" / "seed_5" / "progress.csv")
    results = compare(tmp_path / "mb", tmp_path / "mf")
    assert [r.seed for r in results] == [0, 1]
    assert json.loads((tmp_path / "mb" / "comparison.json").read_text())[0]["interaction_ratio"] == pytest.approx(0.1)


def test_aggregate_empty_directory(tmp_path):
    result = aggregate(tmp_path)
    assert result.seeds == [] and result.metrics == {}


# ------------------------------
# Ligne de commande
# ------------------------------
def test_cli_invalid_config_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"ppo": {"unknown_key": 1}}))
    assert main(["run", "--config", str(path)]) == 2


def test_cli_missing_baseline_exit_code(tmp_path):
    assert main(["baseline-normalize", "--dir", str(tmp_path), "--baseline-dir", str(tmp_path / "absent")]) == 1


def test_cli_run(tiny_config, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(tiny_config.model_dump_json())
    out = tmp_path / "cli_runs"
    assert main(["run", "--config", str(path), "--seed", "3", "--out", str(out)]) == 0
    assert (out / "seed_3" / "summary.json").exists()


def test_beta_sweep_runs_one_experiment_per_beta(tiny_config, tmp_path):
    config = tiny_config.model_copy(update={"env": tiny_config.env.model_copy(update={"name": "circle_track"})})
    result = beta_sweep(config, [0.0, 1.0], tmp_path / "sweep")
    assert result.betas == [0.0, 1.0]
    assert len(result.mean_cost_returns) == 2
    assert (tmp_path / "sweep" / "beta_0" / "aggregate.json").exists()
    assert (tmp_path / "sweep" / "beta_1" / "seed_0" / "progress.csv").exists()
    assert json.loads((tmp_path / "sweep" / "beta_sweep.json").read_text())["betas"] == [0.0, 1.0]
