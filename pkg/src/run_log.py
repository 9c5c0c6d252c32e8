"""
Journal d'entraînement par époque (RunLog) et son schéma CSV versionné.

`progress.csv` ne contient que des colonnes déterministes : deux exécutions
de la même configuration produisent des fichiers identiques octet pour
octet. Le temps écoulé est écrit à part dans `timings.csv`.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd


CSV_SCHEMA_VERSION = 1
COLUMNS = (
    "epoch",
    "outer_epoch",
    "phase",
    "interactions",
    "reward_return",
    "cost_return",
    "episode_reward",
    "episode_cost",
    "lagrange_multiplier",
    "violations",
    "cumulative_violations",
    "performance_ratio",
    "sample_cost",
)
INTEGER_COLUMNS = ("epoch", "outer_epoch", "interactions", "violations", "cumulative_violations")
TIMING_COLUMNS = ("epoch", "wall_clock_seconds")
FLOAT_FORMAT = "%.10g"


class RunLog:
    """
    Lignes du journal, une par époque (une par passe interne en mode basé modèle).

    Le cumul des violations est tenu ici : il ne peut que croître.
    """

    def __init__(self) -> None:
        self.rows: List[Dict[str, Any]] = []
        self.timings: List[Dict[str, Any]] = []

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def cumulative_violations(self) -> int:
        return int(self.rows[-1]["cumulative_violations"]) if self.rows else 0

    @property
    def interactions(self) -> int:
        return int(self.rows[-1]["interactions"]) if self.rows else 0

    def append(
        self,
        *,
        outer_epoch: int,
        phase: str,
        interactions: int,
        reward_return: float,
        cost_return: float,
        episode_reward: float,
        episode_cost: float,
        lagrange_multiplier: float,
        violations: int,
        performance_ratio: Optional[float] = None,
        sample_cost: Optional[float] = None,
        wall_clock_seconds: Optional[float] = None,
    ) -> Dict[str, Any]:
        if violations < 0:
            raise ValueError(f"nombre de violations négatif: {violations}")
        if interactions < self.interactions:
            raise ValueError(f"compteur d'interactions décroissant: {interactions} < {self.interactions}")
        row = {
            "epoch": len(self.rows),
            "outer_epoch": int(outer_epoch),
            "phase": phase,
            "interactions": int(interactions),
            "reward_return": float(reward_return),
            "cost_return": float(cost_return),
            "episode_reward": float(episode_reward),
            "episode_cost": float(episode_cost),
            "lagrange_multiplier": float(lagrange_multiplier),
            "violations": int(violations),
            "cumulative_violations": self.cumulative_violations + int(violations),
            "performance_ratio": math.nan if performance_ratio is None else float(performance_ratio),
            "sample_cost": math.nan if sample_cost is None else float(sample_cost),
        }
        self.rows.append(row)
        if wall_clock_seconds is not None:
            self.timings.append({"epoch": row["epoch"], "wall_clock_seconds": float(wall_clock_seconds)})
        return row

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=list(COLUMNS))
        for column in INTEGER_COLUMNS:
            frame[column] = frame[column].astype(np.int64)
        return frame

    def column(self, name: str) -> np.ndarray:
        if name not in COLUMNS:
            raise KeyError(f"colonne inconnue: {name}")
        return np.array([row[name] for row in self.rows])

    # ------------------------------
    # Écriture / lecture
    # ------------------------------
    def write_csv(self, path: Path | str, timings_path: Path | str | None = None) -> None:
        self.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        if timings_path is not None:
            pd.DataFrame(self.timings, columns=list(TIMING_COLUMNS)).to_csv(
                timings_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
            )

    @classmethod
    def read_csv(cls, path: Path | str) -> "RunLog":
        frame = pd.read_csv(path)
        missing = set(COLUMNS) - set(frame.columns)
        if missing:
            raise ValueError(f"{path}: colonnes manquantes {sorted(missing)}")
        log = cls()
        log.rows = frame[list(COLUMNS)].to_dict(orient="records")
        return log

    @classmethod
    def from_rows(cls, rows: List[Dict[str, Any]]) -> "RunLog":
        log = cls()
        log.rows = [dict(row) for row in rows]
        return log
