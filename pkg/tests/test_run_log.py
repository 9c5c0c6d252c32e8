import math

import numpy as np
import pandas as pd
import pytest

from src.run_log import COLUMNS, RunLog


def filled_log(n: int = 6) -> RunLog:
    log = RunLog()
    for i in range(n):
        log.append(
            outer_epoch=i // 2,
            phase="inner" if i % 3 else "collect",
            interactions=100 * (i // 2 + 1),
            reward_return=1.0 / 3.0 + i,
            cost_return=0.25 * i,
            episode_reward=2.0 * i,
            episode_cost=float(i % 2),
            lagrange_multiplier=math.sqrt(i),
            violations=i % 2,
            performance_ratio=None if i % 3 == 0 else 0.5,
            sample_cost=None if i % 3 == 0 else 0.1 * i,
            wall_clock_seconds=0.01 * i,
        )
    return log


def test_cumulative_violations_accumulate():
    log = filled_log()
    cumulative = log.column("cumulative_violations")
    assert np.all(np.diff(cumulative) >= 0)
    assert log.cumulative_violations == int(log.column("violations").sum()) == 3
    assert log.interactions == 300


def test_missing_optional_columns_are_nan():
    row = filled_log(1).rows[0]
    assert math.isnan(row["performance_ratio"]) and math.isnan(row["sample_cost"])


def test_decreasing_interactions_rejected():
    log = filled_log(2)
    with pytest.raises(ValueError):
        log.append(
            outer_epoch=1, phase="inner", interactions=10, reward_return=0.0, cost_return=0.0,
            episode_reward=0.0, episode_cost=0.0, lagrange_multiplier=0.0, violations=0,
        )


def test_negative_violations_rejected():
    with pytest.raises(ValueError):
        RunLog().append(
            outer_epoch=0, phase="inner", interactions=0, reward_return=0.0, cost_return=0.0,
            episode_reward=0.0, episode_cost=0.0, lagrange_multiplier=0.0, violations=-1,
        )


def test_unknown_column():
    with pytest.raises(KeyError):
        filled_log().column("wall_clock_seconds")


def test_csv_is_deterministic_and_timings_separate(tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    filled_log().write_csv(first, tmp_path / "timings.csv")
    filled_log().write_csv(second)
    assert first.read_bytes() == second.read_bytes()
    assert list(pd.read_csv(first).columns) == list(COLUMNS)
    assert "wall_clock_seconds" not in first.read_text()
    timings = pd.read_csv(tmp_path / "timings.csv")
    assert list(timings["epoch"]) == list(range(6))
    assert b"\r\n" not in first.read_bytes()


def test_csv_read_back(tmp_path):
    log = filled_log()
    path = tmp_path / "progress.csv"
    log.write_csv(path)
    restored = RunLog.read_csv(path)
    pd.testing.assert_frame_equal(restored.to_frame(), log.to_frame(), check_exact=False, rtol=1e-9)


def test_read_rejects_missing_columns(tmp_path):
    path = tmp_path / "progress.csv"
    filled_log().to_frame().drop(columns=["sample_cost"]).to_csv(path, index=False)
    with pytest.raises(ValueError):
        RunLog.read_csv(path)
