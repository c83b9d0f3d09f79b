"""Frequency-channel interventions for domain-generalized image grading."""

from caudr.backend import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
