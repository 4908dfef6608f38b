"""Counterfactual-constrained collaborative filtering.

Trains implicit-feedback recommenders (biased MF and an attention-pooling
sequential model) under a counterfactual consistency penalty, with a
ranking-evaluation harness and a synthetic simulator that knows the
ground-truth preference function.
"""

from cfrec.errors import InvalidInputError

__version__ = "0.1.0"

__all__ = ["InvalidInputError", "__version__"]
