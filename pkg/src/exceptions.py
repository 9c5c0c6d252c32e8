from __future__ import annotations

from typing import Any, Dict, List, Optional


class MbppoError(Exception):
    """Erreur de base du moteur MBPPO-Lagrangian."""


class ShapeError(MbppoError, ValueError):
    """Dimensions incompatibles entre paramètres, entrées ou accumulateurs."""


class NumericError(MbppoError, ArithmeticError):
    """
    Valeur non finie rencontrée dans un calcul.

    Args:
        message: Description du contexte
        value: Valeur fautive (reportée telle quelle)
    """

    def __init__(self, message: str, value: Any = None) -> None:
        super().__init__(f"{message} (valeur: {value!r})")
        self.value = value


class InvalidActionError(MbppoError, ValueError):
    """Action non finie passée à un environnement."""


class DatasetTooSmallError(MbppoError, ValueError):
    """Jeu de transitions trop petit pour entraîner l'ensemble."""


class UntrainedEnsembleError(MbppoError, RuntimeError):
    """Ensemble utilisé avant tout entraînement."""


class TrainingAborted(MbppoError, RuntimeError):
    """
    Entraînement interrompu (perte non finie, échec de l'ensemble...).

    Le snapshot contient l'état diagnostique au moment de l'arrêt, il est
    écrit sur disque par le runner d'expériences.
    """

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.snapshot: Dict[str, Any] = snapshot or {}


class MissingBaselineError(MbppoError, FileNotFoundError):
    """Run de référence (PPO non contraint) absent ou inutilisable."""

    def __init__(self, required_run: str, reason: str = "introuvable") -> None:
        super().__init__(f"Run de référence requis: {required_run} ({reason})")
        self.required_run = required_run


class ExperimentFailed(MbppoError, RuntimeError):
    """Au moins une graine a échoué ; les résultats partiels sont conservés."""

    def __init__(self, failures: List[Dict[str, Any]], output_dir: str) -> None:
        seeds = ", ".join(str(f.get("seed")) for f in failures)
        super().__init__(f"{len(failures)} graine(s) en échec ({seeds}) - voir {output_dir}/failures.json")
        self.failures = failures
        self.output_dir = output_dir
