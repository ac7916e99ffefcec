"""Black-box similarity backends and per-query budget accounting.

A :class:`Scorer` maps ``(query_id, [item_id, ...])`` to scores and knows
nothing about budgets. Budgets live in a :class:`BudgetLedger`, one per
query session, and are enforced by :func:`score_batch`, which also caches
scores so that re-scoring an item is free.
"""

from __future__ import annotations

import abc
import contextlib
import json
import logging
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import AxnError, EmbeddingMatrix, SparseScoreMatrix, load_embeddings, load_sparse

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

__all__ = [
    "BackendFailure",
    "BudgetExhausted",
    "HandshakeMismatch",
    "SpawnFailure",
    "DegenerateDistributionError",
    "Scorer",
    "MatrixScorer",
    "SyntheticOracleSpec",
    "SyntheticScorer",
    "ExternalScorer",
    "NormalizedScorer",
    "BudgetLedger",
    "ScoreNormalizer",
    "score_batch",
    "make_synthetic_oracle",
    "fit_normalizer",
    "apply_normalizer",
    "external_scorer_connect",
    "scorer_from_spec",
]


class BudgetExhausted(AxnError):
    pass


class BackendFailure(AxnError):
    pass


class SpawnFailure(BackendFailure):
    pass


class HandshakeMismatch(BackendFailure):
    pass


class DegenerateDistributionError(AxnError, ValueError):
    pass


class Scorer(abc.ABC):
    """Deterministic similarity oracle ``f(q, i)``."""

    name = "scorer"
    n_queries: int | None = None
    n_items: int | None = None

    @abc.abstractmethod
    def score_batch(self, query_id: int, item_ids: Sequence[int]) -> np.ndarray:
        """Scores for ``item_ids`` against ``query_id``, positionally aligned."""

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def descriptor(self) -> str:
        return self.name


class MatrixScorer(Scorer):
    """Lookup backend over a dense score matrix or the observed entries of a sparse one."""

    name = "oracle"

    def __init__(self, matrix):
        if isinstance(matrix, SparseScoreMatrix):
            self._sparse = matrix
            self._dense = None
            self.n_queries, self.n_items = matrix.shape
        else:
            dense = matrix.data if isinstance(matrix, EmbeddingMatrix) else np.asarray(matrix, dtype=np.float64)
            if dense.ndim != 2 or not np.all(np.isfinite(dense)):
                raise ValueError("score matrix must be a finite 2-D array")
            self._dense = dense
            self._sparse = None
            self.n_queries, self.n_items = dense.shape

    def score_batch(self, query_id, item_ids):
        ids = np.asarray(item_ids, dtype=np.int64)
        if self._dense is not None:
            return self._dense[int(query_id), ids].astype(np.float64)
        try:
            return np.array([self._sparse.get(query_id, i) for i in ids], dtype=np.float64)
        except KeyError as exc:
            raise BackendFailure(f"pair {exc.args[0]} not observed in sparse score matrix") from None


@dataclass(frozen=True)
class SyntheticOracleSpec:
    n_queries: int
    n_items: int
    rank: int
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1 or self.n_items < 1:
            raise ValueError("n_queries and n_items must be positive")
        if not 1 <= self.rank <= min(self.n_queries, self.n_items):
            raise ValueError(f"rank must be in [1, {min(self.n_queries, self.n_items)}], got {self.rank}")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return dict(n_queries=self.n_queries, n_items=self.n_items, rank=self.rank,
                    sigma=self.sigma, seed=self.seed)


class SyntheticScorer(Scorer):
    """Scores ``U*[q] . V*[i] + sigma * eta(q, i)`` from seeded latent factors.

    ``eta`` is standard normal, drawn from a counter-based (Philox) stream
    keyed by ``(seed, q)``, so a query's noise row never depends on which
    other queries were scored before it.
    """

    name = "synth"

    def __init__(self, spec: SyntheticOracleSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.query_factors = rng.standard_normal((spec.n_queries, spec.rank))
        self.item_factors = rng.standard_normal((spec.n_items, spec.rank))
        self.n_queries, self.n_items = spec.n_queries, spec.n_items
        self._noise_row = lru_cache(maxsize=512)(self._make_noise_row)

    def _make_noise_row(self, q: int) -> np.ndarray:
        gen = np.random.Generator(np.random.Philox(key=[self.spec.seed, q]))
        row = gen.standard_normal(self.spec.n_items)
        row.setflags(write=False)
        return row

    def noise(self, query_id: int, item_ids) -> np.ndarray:
        return self._noise_row(int(query_id))[np.asarray(item_ids, dtype=np.int64)]

    def score_batch(self, query_id, item_ids):
        q = int(query_id)
        if not 0 <= q < self.n_queries:
            raise IndexError(f"query id {q} out of range")
        ids = np.asarray(item_ids, dtype=np.int64)
        s = self.item_factors[ids] @ self.query_factors[q]
        if self.spec.sigma > 0:
            s = s + self.spec.sigma * self.noise(q, ids)
        return s

    def full_matrix(self, query_ids=None) -> np.ndarray:
        qs = range(self.n_queries) if query_ids is None else query_ids
        return np.stack([self.score_batch(q, np.arange(self.n_items)) for q in qs])


def make_synthetic_oracle(spec: SyntheticOracleSpec):
    """Build a synthetic scorer and return it with its generating factors."""
    s = SyntheticScorer(spec)
    return (
        s,
        EmbeddingMatrix(s.query_factors, role="query"),
        EmbeddingMatrix(s.item_factors, role="item"),
    )


class NormalizedScorer(Scorer):
    """Applies a fitted :class:`ScoreNormalizer` to another scorer's output."""

    def __init__(self, base: Scorer, normalizer: "ScoreNormalizer"):
        check_is_fitted(normalizer)
        self.base = base
        self.normalizer = normalizer
        self.n_queries, self.n_items = base.n_queries, base.n_items
        self.name = f"normalized({base.descriptor})"

    def score_batch(self, query_id, item_ids):
        return self.normalizer.transform(self.base.score_batch(query_id, item_ids))

    def close(self):
        self.base.close()


# -- budget ------------------------------------------------------------------


@dataclass
class BudgetLedger:
    """Per-query-session call counter and score cache.

    ``budget=None`` means unlimited (used for gold labels and index
    construction).
    """

    budget: int | None = None
    used: int = 0
    log: list | None = None
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be non-negative")

    @property
    def remaining(self) -> float:
        return float("inf") if self.budget is None else self.budget - self.used


def score_batch(scorer: Scorer, query_id: int, item_ids, ledger: BudgetLedger) -> np.ndarray:
    """Score ``item_ids`` for ``query_id``, charging only uncached pairs.

    Raises :class:`BudgetExhausted` without touching the ledger when the
    uncached pairs would overrun the budget. A backend error leaves the
    ledger unchanged as well.
    """
    q = int(query_id)
    ids = [int(i) for i in np.asarray(item_ids, dtype=np.int64).ravel()]
    cache = ledger.cache
    fresh = list(dict.fromkeys(i for i in ids if (q, i) not in cache))
    if fresh:
        if ledger.budget is not None and ledger.used + len(fresh) > ledger.budget:
            raise BudgetExhausted(
                f"query {q}: {len(fresh)} new calls requested, {ledger.budget - ledger.used} remaining"
            )
        try:
            got = np.asarray(scorer.score_batch(q, fresh), dtype=np.float64).ravel()
        except IndexError as exc:
            raise BackendFailure(f"query {q}: {exc}") from exc
        if len(got) != len(fresh):
            raise BackendFailure(f"scorer returned {len(got)} scores for {len(fresh)} items")
        if not np.all(np.isfinite(got)):
            raise BackendFailure("scorer returned non-finite scores")
        for i, s in zip(fresh, got.tolist()):
            cache[(q, i)] = s
        ledger.used += len(fresh)
        if ledger.log is not None:
            ledger.log.extend((q, i) for i in fresh)
    return np.array([cache[(q, i)] for i in ids], dtype=np.float64)


# -- normalization -----------------------------------------------------------


class ScoreNormalizer(TransformerMixin, BaseEstimator):
    """Affine map ``beta * (s - alpha)`` matching one score distribution to another.

    ``fit(ce_scores, ref_scores)`` picks ``alpha_`` and ``beta_`` so that the
    mapped ``ce_scores`` have the mean and standard deviation of
    ``ref_scores``. ``beta_ > 0``, so rankings are preserved.
    """

    def fit(self, X, y):
        ce = np.asarray(X, dtype=np.float64).ravel()
        ref = np.asarray(y, dtype=np.float64).ravel()
        if len(ce) < 2 or len(ref) < 2:
            raise DegenerateDistributionError("need at least two scores on each side")
        sd_ce, sd_ref = ce.std(), ref.std()
        if sd_ce == 0 or sd_ref == 0:
            raise DegenerateDistributionError("score distribution has zero variance")
        self.beta_ = float(sd_ref / sd_ce)
        self.alpha_ = float(ce.mean() - ref.mean() / self.beta_)
        return self

    @classmethod
    def from_params(cls, alpha: float, beta: float) -> "ScoreNormalizer":
        if not beta > 0:
            raise ValueError("beta must be positive")
        n = cls()
        n.alpha_, n.beta_ = float(alpha), float(beta)
        return n

    def transform(self, X):
        check_is_fitted(self)
        return self.beta_ * (np.asarray(X, dtype=np.float64) - self.alpha_)

    def to_dict(self) -> dict:
        check_is_fitted(self)
        return {"alpha": self.alpha_, "beta": self.beta_}


def fit_normalizer(ce_scores, ref_scores) -> ScoreNormalizer:
    return ScoreNormalizer().fit(ce_scores, ref_scores)


def apply_normalizer(n: ScoreNormalizer, s: float) -> float:
    return n.beta_ * (s - n.alpha_)


# -- external process --------------------------------------------------------


class ExternalScorer(Scorer):
    """Scorer living in a child process, spoken to over newline-delimited JSON on stdio.

    Requests are serialized through one pipe; run one instance per worker
    for parallelism.
    """

    def __init__(self, command, protocol_version: int = PROTOCOL_VERSION):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.command = argv
        self.protocol_version = protocol_version
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise SpawnFailure(f"cannot launch {argv!r}: {exc}") from exc
        try:
            reply = self._request({"op": "hello", "version": protocol_version})
        except BackendFailure:
            self.close()
            raise
        if reply.get("op") != "hello" or reply.get("version") != protocol_version:
            self.close()
            raise HandshakeMismatch(
                f"backend speaks version {reply.get('version')!r}, expected {protocol_version}"
            )
        self.name = f"exec:{reply.get('name', argv[0])}"

    def _request(self, msg: dict) -> dict:
        proc = self._proc
        try:
            proc.stdin.write(json.dumps(msg) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise BackendFailure(f"scorer process unavailable: {exc}") from exc
        if not line:
            try:
                code = proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                code = None
            raise BackendFailure(f"scorer process closed its output (exit code {code})")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendFailure(f"malformed reply {line[:80]!r}") from exc
        if not isinstance(reply, dict):
            raise BackendFailure(f"malformed reply {line[:80]!r}")
        return reply

    def score_batch(self, query_id, item_ids):
        ids = [int(i) for i in item_ids]
        with self._lock:
            reply = self._request({"op": "score", "query_id": int(query_id), "item_ids": ids})
        scores = reply.get("scores")
        if reply.get("op") != "score" or not isinstance(scores, list) or len(scores) != len(ids):
            raise BackendFailure(f"malformed score reply: {reply!r}"[:200])
        try:
            return np.array(scores, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise BackendFailure(f"non-numeric scores: {exc}") from exc

    def close(self):
        proc = getattr(self, "_proc", None)
        if proc is None:
            return
        if proc.poll() is not None:
            for fh in (proc.stdin, proc.stdout):
                with contextlib.suppress(OSError, ValueError):
                    fh.close()
            return
        try:
            proc.stdin.write(json.dumps({"op": "shutdown"}) + "\n")
            proc.stdin.flush()
            proc.stdin.close()
            proc.wait(timeout=5)
        except (OSError, ValueError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()
        finally:
            if proc.stdout:
                proc.stdout.close()


def external_scorer_connect(command, protocol_version: int = PROTOCOL_VERSION) -> ExternalScorer:
    return ExternalScorer(command, protocol_version)


def scorer_from_spec(spec: str) -> Scorer:
    """Build a scorer from ``oracle:<file>``, ``synth:<json>`` or ``exec:<command>``.

    ``oracle`` accepts a ``.npy`` dense matrix, a sparse score file (only
    observed pairs can be scored) or an embedding file read as a dense
    query x item matrix.
    """
    kind, sep, arg = spec.partition(":")
    if not sep or not arg:
        raise ValueError(f"bad scorer spec {spec!r}; expected oracle:, synth: or exec:")
    if kind == "oracle":
        path = Path(arg)
        if path.suffix == ".npy":
            return MatrixScorer(np.load(path))
        with open(path, "rb") as fh:
            magic = fh.read(4)
        if magic == b"AXNG":
            return MatrixScorer(load_sparse(path))
        return MatrixScorer(load_embeddings(path))
    if kind == "synth":
        with open(arg) as fh:
            doc = json.load(fh)
        doc = doc.get("oracle", doc)
        return SyntheticScorer(SyntheticOracleSpec(**doc))
    if kind == "exec":
        return ExternalScorer(arg)
    raise ValueError(f"unknown scorer backend {kind!r}")
