"""Symmetry-aware oriented-box learning from horizontal-box supervision, at desk scale."""

__version__ = "0.1.0"
