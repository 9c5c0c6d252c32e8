from __future__ import annotations

import numpy as np
import pytest

from src.schemas import RunConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    """Configuration minuscule pour les tests de bout en bout (quelques secondes)."""
    return RunConfig.model_validate({
        "agent": "ppo_lagrangian",
        "env": {"name": "hazard_goal_2d", "horizon": 20},
        "seeds": [0],
        "budget": 200,
        "cost_limit": 1.0,
        "output_dir": str(tmp_path / "runs"),
        "ppo": {"actor_hidden": [8], "critic_hidden": [8], "update_epochs": 2, "episodes_per_epoch": 5},
        "ensemble": {"n_members": 3, "n_elites": 2, "hidden": [8], "max_epochs": 3, "batch_size": 32, "patience": 2},
        "mbppo": {"horizon": 5, "episodes_per_collection": 5, "imaginary_episodes": 4,
                  "pr_episodes": 2, "max_inner_passes": 2},
    })
