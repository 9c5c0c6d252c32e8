import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from src.schemas import EnsembleConfig, MbppoConfig, RunConfig

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_defaults():
    config = RunConfig()
    assert config.agent == "mbppo_lagrangian"
    assert config.mbppo.horizon == 80 and config.env.horizon == 200
    assert config.mbppo.pr_threshold == pytest.approx(0.66)
    assert config.mbppo.beta == pytest.approx(0.02)
    assert config.mbppo.real_fraction == pytest.approx(0.05)
    assert (config.ensemble.n_members, config.ensemble.n_elites) == (8, 6)


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"ppo": {"learning_rate": 1e-3}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"unknown": 1})


def test_model_horizon_must_be_shorter_than_episode():
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"env": {"horizon": 50}, "mbppo": {"horizon": 50}})
    # sans modèle, H n'est pas utilisé
    RunConfig.model_validate({"agent": "ppo", "env": {"horizon": 50}, "mbppo": {"horizon": 50}})


def test_elites_bounded_by_members():
    with pytest.raises(ValidationError):
        EnsembleConfig(n_members=3, n_elites=4)


@pytest.mark.parametrize("field", ["beta", "pr_threshold", "real_fraction"])
def test_unit_interval_fields(field):
    with pytest.raises(ValidationError):
        MbppoConfig(**{field: 1.5})
    with pytest.raises(ValidationError):
        MbppoConfig(**{field: -0.1})


def test_seeds_validation():
    with pytest.raises(ValidationError):
        RunConfig(seeds=[1, 1])
    with pytest.raises(ValidationError):
        RunConfig(seeds=[])


def test_gamma_open_interval():
    with pytest.raises(ValidationError):
        RunConfig(gamma=1.0)


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.json")))
def test_shipped_configs_validate(name):
    RunConfig.model_validate(json.loads((CONFIG_DIR / name).read_text(encoding="utf-8")))


def test_unknown_env_name_rejected():
    with pytest.raises(ValidationError, match="environnement inconnu"):
        RunConfig.model_validate({"env": {"name": "hazard_goal_3d"}})
    assert RunConfig.model_validate({"env": {"name": "risky_chain"}}).env.name == "risky_chain"
