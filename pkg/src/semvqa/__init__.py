"""Semantic-space auxiliary loss for VQA answer classification, with a synthetic changing-priors testbed."""

__version__ = "0.1.0"
