"""Weighted machine unlearning that targets preference alignment, on a bigram softmax policy."""

from .bilevel import Bilevel, CGConfig, OuterConfig, WeightVector, cg_solve, optimize_on_support
from .forget import ForgetLoss, InnerConfig, InnerProblem
from .selector import U2AConfig, U2ARun, run_u2a

__all__ = [
    "Bilevel",
    "CGConfig",
    "ForgetLoss",
    "InnerConfig",
    "InnerProblem",
    "OuterConfig",
    "U2AConfig",
    "U2ARun",
    "WeightVector",
    "cg_solve",
    "optimize_on_support",
    "run_u2a",
]
