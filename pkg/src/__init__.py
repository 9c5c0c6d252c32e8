"""Apprentissage par renforcement contraint basé modèle (MBPPO-Lagrangian)."""

__version__ = "0.1.0"
