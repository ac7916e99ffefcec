"""Budgeted k-nearest-neighbour search when every exact score is expensive.

Offline, a sparse matrix of exact scores is factorized into item
embeddings; online, a few rounds of exact scoring refine a per-query
embedding that steers which items get scored next.
"""

from .core import EmbeddingMatrix, SparseScoreMatrix, TopKList, topk_indices
from .factorize import InductiveMF, TransductiveMF
from .gbuilder import GBuildSpec, build_sparse_matrix, coverage_stats
from .retrieve import AXNSearcher, AxnConfig, RetrieveRerank, TOURSearcher, axn_search, rnr_search, tour_search
from .scorer import BudgetLedger, ExternalScorer, MatrixScorer, ScoreNormalizer, SyntheticScorer

__all__ = [
    "AXNSearcher",
    "AxnConfig",
    "BudgetLedger",
    "EmbeddingMatrix",
    "ExternalScorer",
    "GBuildSpec",
    "InductiveMF",
    "MatrixScorer",
    "RetrieveRerank",
    "ScoreNormalizer",
    "SparseScoreMatrix",
    "SyntheticScorer",
    "TOURSearcher",
    "TopKList",
    "TransductiveMF",
    "axn_search",
    "build_sparse_matrix",
    "coverage_stats",
    "rnr_search",
    "topk_indices",
    "tour_search",
]
