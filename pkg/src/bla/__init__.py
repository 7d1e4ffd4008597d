"""Bounded logit attention: learned, variable-size explanations for image classifiers."""

__version__ = "0.1.0"
