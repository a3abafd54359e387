"""Leakage-aware PET/CT axial slice classification on synthetic cohorts."""

__version__ = "0.1.0"
