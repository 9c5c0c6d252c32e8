"""
Point d'entrée en ligne de commande.

Sous-commandes :
- run                : entraîne un agent sur une ou plusieurs graines
- aggregate          : agrège un répertoire d'expérience (JSON + DuckDB)
- baseline-normalize : normalise les violations par un run PPO de référence
- compare            : comparaison appariée basée modèle / sans modèle
- sweep-beta         : balayage du facteur de sécurité β
- random-baseline    : retours d'une politique uniforme
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from src.exceptions import ExperimentFailed, MissingBaselineError
from src.expcli import (
    aggregate,
    baseline_normalize,
    beta_sweep,
    build_env,
    compare,
    load_config,
    random_policy_baseline,
    run_experiment,
)
from src.schemas import AGENTS


logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbppo", description="Apprentissage par renforcement contraint basé modèle")
    parser.add_argument("--verbose", "-v", action="store_true", help="Journalisation DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Entraîner un agent")
    run.add_argument("--config", type=Path, default=None, help="Fichier de configuration JSON")
    run.add_argument("--seed", type=int, default=None, help="Graine unique (remplace la liste)")
    run.add_argument("--agent", choices=AGENTS, default=None)
    run.add_argument("--env", default=None, help="Nom de l'environnement")
    run.add_argument("--out", default=None, help="Répertoire de sortie")
    run.add_argument("--budget", type=int, default=None, help="Interactions réelles maximales")
    run.add_argument("--workers", type=int, default=None, help="Graines exécutées en parallèle")
    run.add_argument("--resume", action="store_true", help="Reprendre depuis les checkpoints")

    agg = sub.add_parser("aggregate", help="Agréger un répertoire d'expérience")
    agg.add_argument("--dir", type=Path, required=True)

    norm = sub.add_parser("baseline-normalize", help="Normaliser par le run PPO de référence")
    norm.add_argument("--dir", type=Path, required=True)
    norm.add_argument("--baseline-dir", type=Path, required=True)

    cmp_ = sub.add_parser("compare", help="Comparaison appariée à récompense égale")
    cmp_.add_argument("--model-based-dir", type=Path, required=True)
    cmp_.add_argument("--model-free-dir", type=Path, required=True)
    cmp_.add_argument("--fraction", type=float, default=0.8)

    sweep = sub.add_parser("sweep-beta", help="Balayage de β")
    sweep.add_argument("--config", type=Path, default=None)
    sweep.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.02, 0.1, 0.5, 1.0])
    sweep.add_argument("--out", type=Path, required=True)

    rnd = sub.add_parser("random-baseline", help="Retours d'une politique uniforme")
    rnd.add_argument("--config", type=Path, default=None)
    rnd.add_argument("--env", default=None)
    rnd.add_argument("--episodes", type=int, default=10)
    rnd.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )

    try:
        if args.command == "run":
            config = load_config(
                args.config, seed=args.seed, agent=args.agent, env=args.env,
                output_dir=args.out, budget=args.budget, workers=args.workers,
            )
            run_experiment(config, resume=args.resume)
        elif args.command == "aggregate":
            aggregate(args.dir)
        elif args.command == "baseline-normalize":
            result = baseline_normalize(args.dir, args.baseline_dir)
            print(json.dumps(result["final_normalized_violations"], indent=2))
        elif args.command == "compare":
            results = compare(args.model_based_dir, args.model_free_dir, fraction=args.fraction)
            print(json.dumps([r.model_dump() for r in results], indent=2))
        elif args.command == "sweep-beta":
            result = beta_sweep(load_config(args.config), args.betas, args.out)
            print(result.model_dump_json(indent=2))
        elif args.command == "random-baseline":
            config = load_config(args.config, env=args.env)
            print(json.dumps(random_policy_baseline(build_env(config), args.episodes, args.seed), indent=2))
    except ValidationError as exc:
        logger.error(f"❌ Configuration invalide:\n{exc}")
        return 2
    except (ExperimentFailed, MissingBaselineError) as exc:
        logger.error(f"❌ {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
