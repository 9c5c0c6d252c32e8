from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional

import duckdb
import pandas as pd

from src.run_log import COLUMNS, INTEGER_COLUMNS


logger = logging.getLogger(__name__)

_TYPES = {column: ("BIGINT" if column in INTEGER_COLUMNS else "VARCHAR" if column == "phase" else "DOUBLE") for column in COLUMNS}


class RunLogStore:
    """
    Base DuckDB regroupant les journaux `progress.csv` de plusieurs graines.
    - Connecte/initialise la base
    - Crée les tables progress & import_log
    - Importe un fichier progress.csv ou tout un répertoire d'expérience
    - Expose des métriques finales par graine et des statistiques simples
    """

    def __init__(self, db_path: str | Path = ":memory:") -> None:
        self.db_path = Path(db_path)
        if str(self.db_path) == ":memory:":
            self.con = duckdb.connect()
        else:
            self.db_path.parent.mkdir(parents=True, exist_ok=True)
            self.con = duckdb.connect(database=str(self.db_path))
        self._initialize_database()

    # -------------------------------------------------------------------------
    # Initialisation
    # -------------------------------------------------------------------------
    def _initialize_database(self) -> None:
        columns_sql = ",\n".join(f"{self._ident(c)} {t}" for c, t in _TYPES.items())
        self.con.execute(
            f"""
            CREATE TABLE IF NOT EXISTS progress (
                run_label VARCHAR,
                agent     VARCHAR,
                env       VARCHAR,
                seed      INTEGER,
                {columns_sql}
            );
            """
        )

        # Journal des imports (évite les doublons)
        self.con.execute(
            """
            CREATE TABLE IF NOT EXISTS import_log (
                file_name      VARCHAR,
                import_date    TIMESTAMP,
                rows_imported  BIGINT,
                file_hash      VARCHAR
            );
            """
        )

    # -------------------------------------------------------------------------
    # Utilitaires
    # -------------------------------------------------------------------------
    def is_file_imported(self, filename: str, file_hash: Optional[str] = None) -> bool:
        """Vrai si le fichier est journalisé (et, si `file_hash` est donné, avec ce contenu)."""
        if file_hash is None:
            res = self.con.execute(
                "SELECT 1 FROM import_log WHERE file_name = ? LIMIT 1;", [filename]
            ).fetchone()
        else:
            res = self.con.execute(
                "SELECT 1 FROM import_log WHERE file_name = ? AND file_hash = ? LIMIT 1;",
                [filename, file_hash],
            ).fetchone()
        return res is not None

    @staticmethod
    def _file_hash(path: Path) -> str:
        digest = hashlib.sha256()
        with path.open("rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 16), b""):
                digest.update(chunk)
        return digest.hexdigest()

    # -------------------------------------------------------------------------
    # Import d'un journal
    # -------------------------------------------------------------------------
    def import_progress(self, csv_path: Path, run_label: str, agent: str, env: str, seed: int) -> bool:
        csv_path = Path(csv_path)
        if not csv_path.exists():
            logger.warning(f"Journal introuvable: {csv_path}")
            return False

        key = str(csv_path.resolve())
        file_hash = self._file_hash(csv_path)
        if self.is_file_imported(key, file_hash):
            logger.info(f"Déjà importé: {csv_path}")
            return True

        # Journal réécrit (reprise, relance) : on remplace les lignes de la graine
        if self.is_file_imported(key):
            logger.info(f"Contenu modifié, réimport: {csv_path}")
            self.con.execute("DELETE FROM import_log WHERE file_name = ?;", [key])
        self.con.execute(
            "DELETE FROM progress WHERE run_label = ? AND seed = ?;", [run_label, int(seed)]
        )

        before = self.con.execute("SELECT COUNT(*) FROM progress;").fetchone()[0]
        select_sql = ", ".join(f"CAST({self._ident(c)} AS {t})" for c, t in _TYPES.items())
        target_sql = ", ".join(self._ident(c) for c in ("run_label", "agent", "env", "seed", *COLUMNS))
        self.con.execute(
            f"INSERT INTO progress ({target_sql}) "
            f"SELECT ?, ?, ?, ?, {select_sql} FROM read_csv_auto(?, header = true);",
            [run_label, agent, env, int(seed), str(csv_path)],
        )
        delta = self.con.execute("SELECT COUNT(*) FROM progress;").fetchone()[0] - before

        self.con.execute(
            "INSERT INTO import_log (file_name, import_date, rows_imported, file_hash) "
            "VALUES (?, CURRENT_TIMESTAMP, ?, ?);",
            [key, delta, file_hash],
        )
        logger.info(f"{csv_path} importé ({delta} lignes)")
        return True

    # -------------------------------------------------------------------------
    # Import de toutes les graines d'un répertoire d'expérience
    # -------------------------------------------------------------------------
    def import_experiment(self, experiment_dir: Path, run_label: Optional[str] = None) -> int:
        experiment_dir = Path(experiment_dir)
        if not experiment_dir.exists():
            logger.warning(f"Dossier introuvable: {experiment_dir}")
            return 0

        label = run_label or experiment_dir.name
        count = 0
        for seed_dir in sorted(experiment_dir.glob("seed_*")):
            config_path = seed_dir / "config.json"
            if not config_path.exists():
                continue
            config = json.loads(config_path.read_text(encoding="utf-8"))
            seed = int(seed_dir.name.split("_", 1)[1])
            if self.import_progress(seed_dir / "progress.csv", label, config["agent"], config["env"]["name"], seed):
                count += 1
        logger.info(f"Journaux importés depuis {experiment_dir}: {count}")
        return count

    # -------------------------------------------------------------------------
    # Requêtes
    # -------------------------------------------------------------------------
    def final_metrics(self, window: int = 10) -> pd.DataFrame:
        """
        Moyennes sur les `window` dernières époques externes de chaque graine
        (dernière ligne de chaque époque), cumul et interactions finaux.
        """
        return self.con.execute(
            """
            WITH ranked AS (
                SELECT *,
                       ROW_NUMBER() OVER (PARTITION BY run_label, seed, outer_epoch ORDER BY epoch DESC) AS last_in_epoch,
                       DENSE_RANK() OVER (PARTITION BY run_label, seed ORDER BY outer_epoch DESC) AS rn
                FROM progress
            )
            SELECT run_label, agent, env, seed,
                   AVG(reward_return) FILTER (WHERE rn <= ? AND last_in_epoch = 1) AS final_reward_return,
                   AVG(cost_return)   FILTER (WHERE rn <= ? AND last_in_epoch = 1) AS final_cost_return,
                   MAX(cumulative_violations)                 AS cumulative_violations,
                   MAX(interactions)                          AS interactions,
                   COUNT(*)                                   AS n_rows
            FROM ranked
            GROUP BY run_label, agent, env, seed
            ORDER BY run_label, seed;
            """,
            [window, window],
        ).fetchdf()

    def run_progress(self, run_label: str, seed: int) -> pd.DataFrame:
        return self.con.execute(
            "SELECT * FROM progress WHERE run_label = ? AND seed = ? ORDER BY epoch;",
            [run_label, int(seed)],
        ).fetchdf()

    # -------------------------------------------------------------------------
    # Statistiques
    # -------------------------------------------------------------------------
    def get_statistics(self) -> dict:
        stats: dict[str, Optional[str | int]] = {
            "total_rows": self.con.execute("SELECT COUNT(*) FROM progress;").fetchone()[0],
            "files_imported": self.con.execute("SELECT COUNT(*) FROM import_log;").fetchone()[0],
            "runs": self.con.execute("SELECT COUNT(DISTINCT run_label) FROM progress;").fetchone()[0],
            "db_size_bytes": None,
            "db_size_readable": None,
        }
        if str(self.db_path) != ":memory:" and self.db_path.exists():
            size = self.db_path.stat().st_size
            stats["db_size_bytes"] = size
            stats["db_size_readable"] = self._human_size(size)
        logger.info(
            f"Base {self.db_path}: {stats['total_rows']} lignes, {stats['files_imported']} journaux, "
            f"{stats['runs']} expériences, taille {stats['db_size_readable']}"
        )
        return stats

    # -------------------------------------------------------------------------
    # Fermeture
    # -------------------------------------------------------------------------
    def close(self) -> None:
        self.con.close()

    def __enter__(self) -> "RunLogStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -------------------------------------------------------------------------
    # Helpers
    # -------------------------------------------------------------------------
    @staticmethod
    def _human_size(nbytes: float) -> str:
        # format lisible pour la taille
        for unit in ["B", "KB", "MB", "GB", "TB"]:
            if nbytes < 1024:
                return f"{nbytes:.1f} {unit}"
            nbytes /= 1024
        return f"{nbytes:.1f} PB"

    @staticmethod
    def _ident(name: str) -> str:
        # Quote un identifiant SQL (nom de colonne) proprement
        return '"' + str(name).replace('"', '""') + '"'
