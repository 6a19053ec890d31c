"""Syntax-guided attention masking for grounded instruction following.

A self-contained toolkit: a 6x6 grid world, a small command grammar with a
rule-based parser that turns commands into attention masks, an oracle
planner, compositional dataset splits, a numpy autodiff engine and a
weight-shared multimodal transformer exposed through a scikit-learn style
estimator.
"""

from syngrid.errors import (
    AmbiguousReferent,
    DivergedLoss,
    EmptySplit,
    GenerationExhausted,
    GraphConsumed,
    MalformedCommand,
    NoReferent,
    OutOfVocab,
    ShapeMismatch,
)

__version__ = "0.1.0"

__all__ = [
    "AmbiguousReferent",
    "DivergedLoss",
    "EmptySplit",
    "GenerationExhausted",
    "GraphConsumed",
    "MalformedCommand",
    "NoReferent",
    "OutOfVocab",
    "ShapeMismatch",
]
