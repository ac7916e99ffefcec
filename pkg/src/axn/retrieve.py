"""Test-time search under a budget of exact scorer calls.

:func:`axn_search` is the adaptive method: it retrieves items over several
rounds, refitting the query embedding after each round by least squares
on the exact scores gathered so far and retrieving the next batch with
the refitted embedding. Baselines: :func:`rnr_search` (retrieve by a
fixed embedding, rerank by exact score), :func:`tour_search` (one
gradient step on the query embedding per round) and
:func:`brute_force_knn` (score everything).

Every ranking uses the package-wide order: score descending, id ascending.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix, as_vector, check_fraction, check_ids
from .core import AxnError, DimensionMismatchError, TopKList, topk_indices
from .scorer import BudgetLedger, Scorer, score_batch

__all__ = [
    "DegenerateInputError",
    "AxnConfig",
    "TourConfig",
    "RoundTrace",
    "SearchResult",
    "round_sizes",
    "brute_force_knn",
    "dot_topk",
    "approx_scores",
    "solve_query_embedding",
    "mix_embedding",
    "axn_search",
    "rnr_search",
    "tour_search",
    "tour_mse_loss",
    "tour_mse_grad",
    "tour_ce_loss",
    "tour_ce_grad",
    "AXNSearcher",
    "RetrieveRerank",
    "TOURSearcher",
]

INIT_POLICIES = ("random", "emb", "ranking")
_INIT_ALIASES = {"emb_topk": "emb", "precomputed_ranking": "ranking", "embedding": "emb"}


class DegenerateInputError(AxnError, ValueError):
    pass


def _canonical_init(name: str) -> str:
    key = str(name).strip().lower()
    key = _INIT_ALIASES.get(key, key)
    if key not in INIT_POLICIES:
        raise ValueError(f"unknown init policy {name!r}; expected one of {INIT_POLICIES}")
    return key


def round_sizes(budget: int, rounds: int, k_s: int | None = None) -> list[int]:
    """Per-round retrieval counts.

    Without ``k_s`` the budget is split evenly and any remainder goes to
    the earliest rounds, e.g. ``(103, 5) -> [21, 21, 21, 20, 20]``.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if k_s is not None:
        if k_s < 1 or k_s * rounds > budget:
            raise ValueError(f"k_s={k_s} x rounds={rounds} exceeds budget {budget}")
        return [k_s] * rounds
    base, extra = divmod(budget, rounds)
    return [base + 1] * extra + [base] * (rounds - extra)


@dataclass(frozen=True)
class AxnConfig:
    budget: int
    rounds: int = 5
    k_s: int | None = None
    lam: float = 0.0
    init: str = "random"
    shortlist_size: int | None = None
    pinv_tolerance: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init", _canonical_init(self.init))
        check_fraction(self.lam, "lambda")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.shortlist_size is not None and self.shortlist_size < 1:
            raise ValueError("shortlist_size must be >= 1")
        if self.pinv_tolerance < 0:
            raise ValueError("pinv_tolerance must be >= 0")
        round_sizes(self.budget, self.rounds, self.k_s)

    @property
    def sizes(self) -> list[int]:
        return round_sizes(self.budget, self.rounds, self.k_s)


@dataclass(frozen=True)
class TourConfig:
    budget: int
    rounds: int = 5
    k_s: int | None = None
    variant: str = "mse"
    learning_rate: float | None = None
    temperature: float = 1.0
    shortlist_size: int | None = None

    def __post_init__(self):
        if self.variant not in ("mse", "ce"):
            raise ValueError("variant must be 'mse' or 'ce'")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", 1e-3 if self.variant == "mse" else 0.1)
        if self.learning_rate < 0 or self.temperature <= 0:
            raise ValueError("learning_rate must be >= 0 and temperature > 0")
        round_sizes(self.budget, self.rounds, self.k_s)

    @property
    def sizes(self) -> list[int]:
        return round_sizes(self.budget, self.rounds, self.k_s)


@dataclass(frozen=True)
class RoundTrace:
    round: int
    new_items: tuple
    residual_norm: float | None = None


@dataclass
class SearchResult:
    topk: TopKList
    retrieved: tuple
    exact_scores: tuple
    calls_used: int
    approx_scores: np.ndarray | None = None
    approx_item_ids: np.ndarray | None = None
    trace: list = field(default_factory=list)
    stopped_early: bool = False
    query_embedding: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "topk": [[i, s] for i, s in self.topk.items],
            "calls_used": self.calls_used,
            "stopped_early": self.stopped_early,
            "per_round_trace": [
                {"round": t.round, "new_items": list(t.new_items), "residual_norm": t.residual_norm}
                for t in self.trace
            ],
        }


# -- primitives --------------------------------------------------------------


def approx_scores(u, V, shortlist=None) -> np.ndarray:
    """``V @ u`` for every item, or only for the ``shortlist`` ids (in that order)."""
    Vm = as_matrix(V, "V")
    u = as_vector(u, Vm.shape[1])
    full = Vm @ u
    if shortlist is None:
        return full
    return full[check_ids(shortlist, Vm.shape[0], "shortlist")]


def _candidates(n: int, exclude=None, shortlist=None) -> np.ndarray:
    cand = np.arange(n) if shortlist is None else np.unique(check_ids(list(shortlist), n, "shortlist"))
    if exclude is not None and len(exclude):
        cand = cand[~np.isin(cand, np.fromiter(exclude, dtype=np.int64))]
    return cand


def dot_topk(u, V, k: int, exclude=None, shortlist=None) -> TopKList:
    """Top-``k`` items by ``u . V[i]`` over the shortlist (or all items) minus ``exclude``."""
    full = approx_scores(u, V)
    cand = _candidates(len(full), exclude, shortlist)
    pos = topk_indices(full[cand], k, cand)
    return TopKList(k, tuple(zip(cand[pos].tolist(), full[cand[pos]].tolist())))


def solve_query_embedding(V_A, a, tol: float = 1e-10) -> np.ndarray:
    """Minimum-norm least-squares solution of ``V_A u = a``.

    Uses the SVD of ``V_A``; singular values below ``tol * sigma_max``
    count as zero, so under-determined or rank-deficient systems return
    the minimum-norm solution.
    """
    V_A = np.atleast_2d(np.asarray(V_A, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64).ravel()
    if V_A.shape[0] == 0 or len(a) == 0:
        raise DegenerateInputError("cannot solve for a query embedding from zero scored items")
    if V_A.shape[0] != len(a):
        raise DimensionMismatchError(f"{V_A.shape[0]} rows but {len(a)} scores")
    Uw, s, Vt = np.linalg.svd(V_A, full_matrices=False)
    if s[0] == 0:
        return np.zeros(V_A.shape[1])
    keep = s > tol * s[0]
    coef = (Uw[:, keep].T @ a) / s[keep]
    return Vt[keep].T @ coef


def mix_embedding(u_linreg, u_param, lam: float) -> np.ndarray:
    """``(1 - lam) * u_linreg + lam * u_param``; the endpoints return the inputs unchanged."""
    lam = check_fraction(lam, "lambda")
    u_lin = as_vector(u_linreg, name="u_linreg")
    u_par = as_vector(u_param, len(u_lin), name="u_param")
    if lam == 0.0:
        return u_lin.copy()
    if lam == 1.0:
        return u_par.copy()
    return (1.0 - lam) * u_lin + lam * u_par


def brute_force_knn(scorer: Scorer, q: int, k: int, n_items: int | None = None, batch_size: int = 4096) -> TopKList:
    """Exact top-``k`` by scoring every item (no budget)."""
    n = n_items if n_items is not None else scorer.n_items
    if n is None:
        raise ValueError("number of items unknown; pass n_items")
    ids = np.arange(n)
    scores = np.concatenate(
        [np.asarray(scorer.score_batch(q, ids[s : s + batch_size]), dtype=np.float64) for s in range(0, n, batch_size)]
    )
    return TopKList.from_scores(ids, scores, k)


# -- search loops ------------------------------------------------------------


class _Pool:
    """Candidate items (all or a shortlist) and which of them are already taken."""

    def __init__(self, n: int, shortlist=None):
        self.ids = np.arange(n) if shortlist is None else np.asarray(shortlist, dtype=np.int64)
        self.is_shortlist = shortlist is not None
        self.taken = np.zeros(n, dtype=bool)

    def next_best(self, full_scores: np.ndarray, k: int) -> np.ndarray:
        free = self.ids[~self.taken[self.ids]]
        pos = topk_indices(full_scores[free], k, free)
        return free[pos]

    def free_ids(self) -> np.ndarray:
        return self.ids[~self.taken[self.ids]]

    def take(self, items):
        self.taken[items] = True


def _random_pick(rng: np.random.Generator, ids: np.ndarray, k: int) -> np.ndarray:
    k = min(k, len(ids))
    return ids[rng.choice(len(ids), size=k, replace=False)]


def _ranking_prefix(ranking, n: int, k: int, allowed=None) -> np.ndarray:
    out, seen = [], set()
    for i in ranking:
        i = int(i)
        if i in seen or not 0 <= i < n or (allowed is not None and not allowed[i]):
            continue
        seen.add(i)
        out.append(i)
        if len(out) == k:
            break
    return np.array(out, dtype=np.int64)


def _first_round(init, V, u_param, init_ranking, rng, pool: _Pool, size, shortlist_size):
    """Choose the shortlist (if configured) and the round-1 items."""
    n = V.shape[0]
    if init == "emb":
        base = V @ u_param
        if shortlist_size is not None:
            pool.ids = np.sort(topk_indices(base, shortlist_size))
            pool.is_shortlist = True
        return pool.next_best(base, size)
    if init == "ranking":
        if shortlist_size is not None:
            pool.ids = np.sort(_ranking_prefix(init_ranking, n, shortlist_size))
            pool.is_shortlist = True
        allowed = np.zeros(n, dtype=bool)
        allowed[pool.ids] = True
        return _ranking_prefix(init_ranking, n, size, allowed)
    if shortlist_size is not None:
        pool.ids = np.sort(_random_pick(rng, pool.ids, shortlist_size))
        pool.is_shortlist = True
    return _random_pick(rng, pool.free_ids(), size)


def _finish(A, a, k, ledger, trace, stopped, u, V, pool) -> SearchResult:
    full = V @ u if u is not None else None
    return SearchResult(
        topk=TopKList.from_scores(A, a, k),
        retrieved=tuple(int(i) for i in A),
        exact_scores=tuple(float(s) for s in a),
        calls_used=ledger.used,
        approx_scores=None if full is None else (full[pool.ids] if pool.is_shortlist else full),
        approx_item_ids=pool.ids.copy() if pool.is_shortlist else None,
        trace=trace,
        stopped_early=stopped,
        query_embedding=u,
    )


def axn_search(
    cfg: AxnConfig,
    V,
    scorer: Scorer,
    q: int,
    k: int,
    u_param=None,
    init_ranking: Sequence[int] | None = None,
    ledger: BudgetLedger | None = None,
) -> SearchResult:
    """Adaptive multi-round retrieval for query ``q`` within ``cfg.budget`` exact calls.

    Round 1 picks items by the init policy; every later round refits the
    query embedding on all exact scores so far (mixed with ``u_param`` by
    ``cfg.lam``) and retrieves the best not-yet-scored items. Returns the
    top-``k`` of everything scored, ranked by exact score.
    """
    V = as_matrix(V, "V")
    n, d = V.shape
    if cfg.init == "emb" or cfg.lam > 0:
        if u_param is None:
            raise ValueError("u_param is required for init='emb' or lambda > 0")
        u_param = as_vector(u_param, d, "u_param")
    if cfg.init == "ranking" and init_ranking is None:
        raise ValueError("init_ranking is required for init='ranking'")
    ledger = ledger if ledger is not None else BudgetLedger(cfg.budget)
    rng = np.random.default_rng([cfg.seed, int(q)])
    pool = _Pool(n)
    sizes = [s for s in cfg.sizes if s > 0]
    A: list[int] = []
    a: list[float] = []
    trace: list[RoundTrace] = []
    u = None
    stopped = False

    for r, size in enumerate(sizes, start=1):
        if r == 1:
            new = _first_round(cfg.init, V, u_param, init_ranking, rng, pool, size, cfg.shortlist_size)
        else:
            new = pool.next_best(V @ u, size)
        if len(new) == 0:
            stopped = True
            break
        pool.take(new)
        A.extend(int(i) for i in new)
        a.extend(score_batch(scorer, q, new, ledger).tolist())
        V_A = V[A]
        u_lin = solve_query_embedding(V_A, a, cfg.pinv_tolerance)
        u = mix_embedding(u_lin, u_param, cfg.lam) if cfg.lam > 0 else u_lin
        resid = float(np.linalg.norm(V_A @ u_lin - np.asarray(a)))
        trace.append(RoundTrace(r, tuple(int(i) for i in new), resid))
        if len(new) < size:
            stopped = True
            break
    if not A:
        raise DegenerateInputError("no items could be retrieved")
    return _finish(A, a, k, ledger, trace, stopped, u, V, pool)


def rnr_search(
    V,
    scorer: Scorer,
    q: int,
    u,
    m: int,
    k: int,
    ledger: BudgetLedger | None = None,
    shortlist=None,
) -> SearchResult:
    """Retrieve the top-``m`` items by ``u . V[i]``, score them exactly, return the top-``k``."""
    V = as_matrix(V, "V")
    u = as_vector(u, V.shape[1], "u")
    ledger = ledger if ledger is not None else BudgetLedger(m)
    pool = _Pool(V.shape[0], None if shortlist is None else np.unique(shortlist))
    full = V @ u
    A = pool.next_best(full, m)
    pool.take(A)
    a = score_batch(scorer, q, A, ledger)
    trace = [RoundTrace(1, tuple(int(i) for i in A), None)]
    return _finish(A.tolist(), a.tolist(), k, ledger, trace, len(A) < m, u, V, pool)


def tour_mse_loss(u, V_R, a) -> float:
    r = np.asarray(V_R) @ u - np.asarray(a)
    return float(np.mean(r * r))


def tour_mse_grad(u, V_R, a) -> np.ndarray:
    V_R = np.asarray(V_R, dtype=np.float64)
    r = V_R @ u - np.asarray(a, dtype=np.float64)
    return (2.0 / len(r)) * (V_R.T @ r)


def tour_ce_loss(u, V_R, a, temperature: float = 1.0) -> float:
    """``KL(softmax(a/T) || softmax(V_R u / T))`` over one round's items."""
    log_p = log_softmax(np.asarray(a, dtype=np.float64) / temperature)
    log_phat = log_softmax(np.asarray(V_R) @ u / temperature)
    return float(np.sum(np.exp(log_p) * (log_p - log_phat)))


def tour_ce_grad(u, V_R, a, temperature: float = 1.0) -> np.ndarray:
    V_R = np.asarray(V_R, dtype=np.float64)
    p = softmax(np.asarray(a, dtype=np.float64) / temperature)
    phat = softmax(V_R @ u / temperature)
    return V_R.T @ (phat - p) / temperature


def tour_search(
    cfg: TourConfig,
    V,
    scorer: Scorer,
    q: int,
    k: int,
    u_param,
    ledger: BudgetLedger | None = None,
) -> SearchResult:
    """Pseudo-relevance-feedback baseline: retrieve by the current embedding,
    then take one gradient step on it using the round's exact scores."""
    V = as_matrix(V, "V")
    u = as_vector(u_param, V.shape[1], "u_param").copy()
    ledger = ledger if ledger is not None else BudgetLedger(cfg.budget)
    pool = _Pool(V.shape[0])
    if cfg.shortlist_size is not None:
        pool.ids = np.sort(topk_indices(V @ u, cfg.shortlist_size))
        pool.is_shortlist = True
    grad = tour_mse_grad if cfg.variant == "mse" else (
        lambda u_, V_, a_: tour_ce_grad(u_, V_, a_, cfg.temperature)
    )
    A, a, trace, stopped = [], [], [], False
    for r, size in enumerate((s for s in cfg.sizes if s > 0), start=1):
        new = pool.next_best(V @ u, size)
        if len(new) == 0:
            stopped = True
            break
        pool.take(new)
        got = score_batch(scorer, q, new, ledger)
        A.extend(int(i) for i in new)
        a.extend(got.tolist())
        V_R = V[new]
        if cfg.learning_rate > 0:
            u = u - cfg.learning_rate * grad(u, V_R, got)
        trace.append(RoundTrace(r, tuple(int(i) for i in new), float(np.linalg.norm(V_R @ u - got))))
        if len(new) < size:
            stopped = True
            break
    if not A:
        raise DegenerateInputError("no items could be retrieved")
    return _finish(A, a, k, ledger, trace, stopped, u, V, pool)


# -- estimators --------------------------------------------------------------


class _SearcherMixin:
    def fit(self, X, y=None):
        """Store the item embeddings searched over."""
        self.item_embeddings_ = as_matrix(X, "item_embeddings")
        self.n_items_, self.dim_ = self.item_embeddings_.shape
        return self

    def search_many(self, scorer: Scorer, query_ids, k: int, u_params=None, **kwargs) -> list[SearchResult]:
        out = []
        for j, q in enumerate(query_ids):
            up = None if u_params is None else as_matrix(u_params)[j]
            out.append(self.search(scorer, q, k, u_param=up, **kwargs))
        return out


class AXNSearcher(_SearcherMixin, BaseEstimator):
    """Estimator front end for :func:`axn_search`; ``fit`` takes the item embeddings."""

    def __init__(self, budget=100, rounds=5, k_s=None, lam=0.0, init="random",
                 shortlist_size=None, pinv_tolerance=1e-10, seed=0):
        self.budget = budget
        self.rounds = rounds
        self.k_s = k_s
        self.lam = lam
        self.init = init
        self.shortlist_size = shortlist_size
        self.pinv_tolerance = pinv_tolerance
        self.seed = seed

    def config(self) -> AxnConfig:
        return AxnConfig(
            budget=self.budget, rounds=self.rounds, k_s=self.k_s, lam=self.lam, init=self.init,
            shortlist_size=self.shortlist_size, pinv_tolerance=self.pinv_tolerance, seed=self.seed,
        )

    def search(self, scorer: Scorer, query_id: int, k: int = 10, u_param=None, init_ranking=None) -> SearchResult:
        check_is_fitted(self)
        return axn_search(self.config(), self.item_embeddings_, scorer, query_id, k, u_param, init_ranking)


class RetrieveRerank(_SearcherMixin, BaseEstimator):
    def __init__(self, budget=100):
        self.budget = budget

    def search(self, scorer: Scorer, query_id: int, k: int = 10, u_param=None) -> SearchResult:
        check_is_fitted(self)
        if u_param is None:
            raise ValueError("retrieve-and-rerank needs a query embedding")
        return rnr_search(self.item_embeddings_, scorer, query_id, u_param, self.budget, k)


class TOURSearcher(_SearcherMixin, BaseEstimator):
    def __init__(self, budget=100, rounds=5, k_s=None, variant="mse", learning_rate=None,
                 temperature=1.0, shortlist_size=None):
        self.budget = budget
        self.rounds = rounds
        self.k_s = k_s
        self.variant = variant
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.shortlist_size = shortlist_size

    def config(self) -> TourConfig:
        return TourConfig(
            budget=self.budget, rounds=self.rounds, k_s=self.k_s, variant=self.variant,
            learning_rate=self.learning_rate, temperature=self.temperature,
            shortlist_size=self.shortlist_size,
        )

    def search(self, scorer: Scorer, query_id: int, k: int = 10, u_param=None) -> SearchResult:
        check_is_fitted(self)
        if u_param is None:
            raise ValueError("TOUR needs an initial query embedding")
        return tour_search(self.config(), self.item_embeddings_, scorer, query_id, k, u_param)
