"""
Points de reprise versionnés (JSON).

Un checkpoint contient tout ce qu'il faut pour une reprise exacte :
paramètres, accumulateurs d'Adam, multiplicateur de Lagrange, état des
générateurs aléatoires, compteur d'interactions et lignes du journal.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict

import numpy as np


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mbppo-checkpoint"
CHECKPOINT_VERSION = 1


def rng_to_dict(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def rng_from_dict(state: Dict[str, Any]) -> np.random.Generator:
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"générateur non supporté: {state.get('bit_generator')}")
    bit_generator = np.random.PCG64()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def save_checkpoint(path: Path | str, kind: str, payload: Dict[str, Any]) -> Path:
    """
    Écrit un checkpoint de façon atomique (fichier temporaire puis renommage).

    Args:
        path: Fichier de destination
        kind: Type d'entraîneur ("model_free" ou "model_based")
        payload: Contenu sérialisable en JSON
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind, "payload": payload}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as handle:
        json.dump(document, handle)
    os.replace(tmp, path)
    logger.debug(f"Checkpoint écrit: {path}")
    return path


def load_checkpoint(path: Path | str, kind: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        document = json.load(handle)
    if document.get("format") != CHECKPOINT_FORMAT or document.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: format de checkpoint non supporté")
    if document.get("kind") != kind:
        raise ValueError(f"{path}: checkpoint '{document.get('kind')}', '{kind}' attendu")
    return document["payload"]
