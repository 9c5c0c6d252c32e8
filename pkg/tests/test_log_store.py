import json

import pytest

from src.log_store import RunLogStore
from tests.test_run_log import filled_log


@pytest.fixture
def experiment_dir(tmp_path):
    root = tmp_path / "exp"
    for seed in (0, 1):
        seed_dir = root / f"seed_{seed}"
        seed_dir.mkdir(parents=True)
        (seed_dir / "config.json").write_text(json.dumps({"agent": "mbppo_lagrangian", "env": {"name": "circle_track"}}))
        filled_log(4 + seed).write_csv(seed_dir / "progress.csv")
    (root / "seed_9").mkdir()
    return root


def test_import_experiment_and_dedup(experiment_dir):
    with RunLogStore() as store:
        assert store.import_experiment(experiment_dir) == 2
        assert store.get_statistics()["total_rows"] == 9
        store.import_experiment(experiment_dir)
        stats = store.get_statistics()
        assert stats["total_rows"] == 9
        assert stats["files_imported"] == 2


def test_missing_inputs_are_skipped(tmp_path):
    with RunLogStore() as store:
        assert store.import_experiment(tmp_path / "absent") == 0
        assert store.import_progress(tmp_path / "absent.csv", "x", "ppo", "circle_track", 0) is False


def test_final_metrics_window(experiment_dir):
    with RunLogStore() as store:
        store.import_experiment(experiment_dir, run_label="run")
        metrics = store.final_metrics(window=2).set_index("seed")
        # seed 0 : époques externes 0 et 1 (lignes 1 et 3), reward_return = 1/3 + i
        assert metrics.loc[0, "final_reward_return"] == pytest.approx(1.0 / 3.0 + 2.0, rel=1e-9)
        assert metrics.loc[0, "n_rows"] == 4
        assert metrics.loc[1, "cumulative_violations"] == 2
        assert metrics.loc[1, "interactions"] == 300
        assert list(store.run_progress("run", 1)["epoch"]) == list(range(5))


def test_persistent_database(tmp_path, experiment_dir):
    db_path = tmp_path / "db" / "runs.duckdb"
    with RunLogStore(db_path) as store:
        store.import_experiment(experiment_dir)
    with RunLogStore(db_path) as store:
        stats = store.get_statistics()
        assert stats["files_imported"] == 2
        assert stats["db_size_bytes"] > 0


def test_rewritten_progress_replaces_previous_rows(experiment_dir):
    csv_path = experiment_dir / "seed_0" / "progress.csv"
    with RunLogStore() as store:
        store.import_experiment(experiment_dir, run_label="run")
        assert store.final_metrics(window=2).set_index("seed").loc[0, "n_rows"] == 4

        # relance de la graine 0 : le journal est réécrit avec plus d'époques
        filled_log(7).write_csv(csv_path)
        assert store.import_experiment(experiment_dir, run_label="run") == 2

        metrics = store.final_metrics(window=2).set_index("seed")
        assert metrics.loc[0, "n_rows"] == 7
        # lignes 5 et 6 : reward_return = 1/3 + i
        assert metrics.loc[0, "final_reward_return"] == pytest.approx(1.0 / 3.0 + 5.5, rel=1e-9)
        assert metrics.loc[0, "interactions"] == 400
        assert metrics.loc[1, "n_rows"] == 5
        assert list(store.run_progress("run", 0)["epoch"]) == list(range(7))

        stats = store.get_statistics()
        assert stats["total_rows"] == 12
        assert stats["files_imported"] == 2
