"""Construction of the sparse train-query x item score matrix.

Three observation patterns are supported:

``q-topk``
    the ``k_d`` best items per train query under the base embeddings;
``q-random``
    ``k_d`` items per train query drawn uniformly without replacement;
``i-topk``
    the ``k_d`` best train queries per item under the base embeddings.

The first two cost ``k_d * n_queries`` scorer calls, the last
``k_d * n_items``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._validation import as_matrix
from .core import EmbeddingMatrix, SparseScoreMatrix, topk_indices
from .scorer import BudgetExhausted, BudgetLedger, ScoreNormalizer, Scorer, score_batch

log = logging.getLogger(__name__)

__all__ = ["GBuildSpec", "build_sparse_matrix", "coverage_stats", "normalizer_from_g", "STRATEGIES"]

STRATEGIES = ("q-topk", "q-random", "i-topk")
_ALIASES = {"q_topk": "q-topk", "q_random": "q-random", "i_topk_queries": "i-topk", "i_topk": "i-topk"}


def _canonical_strategy(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
    return key


@dataclass(frozen=True)
class GBuildSpec:
    """How to choose the observed coordinates of the train score matrix.

    ``query_ids`` maps row ``j`` of the matrix to the scorer's query id
    (identity by default). ``n_queries``/``n_items`` are only needed for
    ``q-random`` when no embeddings are given.
    """

    strategy: str
    k_d: int
    seed: int = 0
    base_query_embs: EmbeddingMatrix | None = None
    base_item_embs: EmbeddingMatrix | None = None
    n_queries: int | None = None
    n_items: int | None = None
    query_ids: Sequence[int] | None = None
    batch_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "strategy", _canonical_strategy(self.strategy))
        if self.k_d < 1:
            raise ValueError("k_d must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.strategy != "q-random":
            if self.base_query_embs is None or self.base_item_embs is None:
                raise ValueError(f"strategy {self.strategy} needs base query and item embeddings")
            if as_matrix(self.base_query_embs).shape[1] != as_matrix(self.base_item_embs).shape[1]:
                raise ValueError("base query and item embeddings differ in dimension")
        nq, ni = self.shape
        if nq is None or ni is None:
            raise ValueError("cannot infer matrix shape; pass n_queries/n_items or embeddings")
        if self.strategy == "i-topk" and self.k_d > nq:
            raise ValueError(f"k_d={self.k_d} exceeds the {nq} train queries")
        if self.strategy != "i-topk" and self.k_d > ni:
            raise ValueError(f"k_d={self.k_d} exceeds the {ni} items")
        if self.query_ids is not None and len(self.query_ids) != nq:
            raise ValueError("query_ids must have one entry per train query")

    @property
    def shape(self) -> tuple:
        nq = self.n_queries
        ni = self.n_items
        if self.base_query_embs is not None:
            nq = as_matrix(self.base_query_embs).shape[0]
        if self.base_item_embs is not None:
            ni = as_matrix(self.base_item_embs).shape[0]
        return nq, ni

    @property
    def expected_nnz(self) -> int:
        nq, ni = self.shape
        return self.k_d * (ni if self.strategy == "i-topk" else nq)


def _base_scores(spec: GBuildSpec) -> np.ndarray:
    return as_matrix(spec.base_query_embs) @ as_matrix(spec.base_item_embs).T


def _select(spec: GBuildSpec) -> list[np.ndarray]:
    """Item ids to observe for every train-query row."""
    nq, ni = spec.shape
    if spec.strategy == "q-random":
        return [
            np.sort(np.random.default_rng([spec.seed, row]).choice(ni, size=spec.k_d, replace=False))
            for row in range(nq)
        ]
    scores = _base_scores(spec)
    if spec.strategy == "q-topk":
        return [np.sort(topk_indices(scores[row], spec.k_d)) for row in range(nq)]
    per_query: list[list[int]] = [[] for _ in range(nq)]
    for item in range(ni):
        for row in topk_indices(scores[:, item], spec.k_d):
            per_query[row].append(item)
    return [np.array(sorted(items), dtype=np.int64) for items in per_query]


def build_sparse_matrix(
    spec: GBuildSpec,
    scorer: Scorer,
    ledger: BudgetLedger | None = None,
    normalizer: ScoreNormalizer | None = None,
    workers: int = 1,
) -> SparseScoreMatrix:
    """Score the selected coordinates and assemble the sparse matrix.

    Scoring is charged to ``ledger`` when given. With ``workers > 1`` rows
    are scored concurrently (the total is checked against the ledger
    first). ``normalizer``, if fitted, maps scores before storage.
    """
    nq, ni = spec.shape
    rows = _select(spec)
    qids = list(range(nq)) if spec.query_ids is None else [int(q) for q in spec.query_ids]
    ledger = ledger if ledger is not None else BudgetLedger()
    total = sum(len(r) for r in rows)
    log.info("scoring %d pairs (%s, k_d=%d)", total, spec.strategy, spec.k_d)

    def score_row(row: int, led: BudgetLedger) -> np.ndarray:
        items = rows[row]
        out = np.empty(len(items))
        for start in range(0, len(items), spec.batch_size):
            chunk = items[start : start + spec.batch_size]
            out[start : start + len(chunk)] = score_batch(scorer, qids[row], chunk, led)
        return out

    if workers > 1:
        if total > ledger.remaining:
            raise BudgetExhausted(f"building G needs {total} calls, {ledger.remaining} remaining")
        privates = [BudgetLedger() for _ in range(nq)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(score_row, range(nq), privates))
        ledger.used += sum(p.used for p in privates)
    else:
        values = [score_row(row, ledger) for row in range(nq)]

    q = np.concatenate([np.full(len(r), row, dtype=np.int64) for row, r in enumerate(rows)]) if nq else np.empty(0)
    i = np.concatenate(rows) if nq else np.empty(0)
    s = np.concatenate(values) if nq else np.empty(0)
    if normalizer is not None:
        s = normalizer.transform(s)
    return SparseScoreMatrix(nq, ni, q, i, s)


def normalizer_from_g(g: SparseScoreMatrix, base_q, base_i, n_queries: int = 100) -> ScoreNormalizer:
    """Fit a normalizer mapping observed scores of the first ``n_queries`` rows
    onto the base dot-product distribution at the same coordinates."""
    mask = g.query_ids < n_queries
    Q, I = as_matrix(base_q), as_matrix(base_i)
    ref = np.einsum("ij,ij->i", Q[g.query_ids[mask]], I[g.item_ids[mask]])
    return ScoreNormalizer().fit(g.scores[mask], ref)


def coverage_stats(g: SparseScoreMatrix) -> dict:
    """Per-item observation counts: min, mean, max and the fraction of unseen items."""
    if g.n_items == 0:
        return {"min": 0, "mean": 0.0, "max": 0, "zero_fraction": 1.0}
    counts = np.bincount(g.item_ids, minlength=g.n_items)
    return {
        "min": int(counts.min()),
        "mean": float(counts.mean()),
        "max": int(counts.max()),
        "zero_fraction": float(np.mean(counts == 0)),
    }
