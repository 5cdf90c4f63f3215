"""Candidate evaluation at desk scale.

The torch-backed trainer lives in :mod:`tgsage.evaluator.trainer` and
:mod:`tgsage.evaluator.network`; the numpy-only pieces are re-exported here.
"""

from .cost import Candidate, RerankError, RerankResult, rerank_top_k, search_cost
from .dataset import DeskDataset, Split
from .surrogate import SurrogateBenchmark, SurrogateResult, evaluate_surrogate

__all__ = [
    "Candidate",
    "DeskDataset",
    "RerankError",
    "RerankResult",
    "Split",
    "SurrogateBenchmark",
    "SurrogateResult",
    "evaluate_surrogate",
    "rerank_top_k",
    "search_cost",
]
