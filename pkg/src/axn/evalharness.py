"""Recall evaluation over a seeded synthetic benchmark.

The desk benchmark stands in for a real cross-encoder: a low-rank
synthetic scorer plus noise, and "base" embeddings that are a noisy copy
of the scorer's latent factors (playing the role of a pretrained
dual-encoder). :func:`run_experiment` indexes the items, runs each search
method at each budget over the test queries, and reports
Top-k-Recall@m against brute-force gold labels.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EmbeddingMatrix, TopKList
from .factorize import InductiveMF, TransductiveMF
from .gbuilder import GBuildSpec, build_sparse_matrix, coverage_stats
from .retrieve import AxnConfig, TourConfig, axn_search, brute_force_knn, rnr_search, tour_search
from .scorer import BudgetLedger, Scorer, SyntheticOracleSpec, SyntheticScorer

log = logging.getLogger(__name__)

__all__ = [
    "SizeMismatchError",
    "BenchmarkSpec",
    "DeskBenchmark",
    "IndexSpec",
    "MethodSpec",
    "ExperimentSpec",
    "ReportRow",
    "RecallReport",
    "make_desk_benchmark",
    "build_index",
    "topk_recall_at_m",
    "make_gold",
    "run_method",
    "evaluate_methods",
    "summarize",
    "run_experiment",
    "emit_plotdata",
]

PHASES = ("base_embeddings", "compute_g", "train", "embed_items")


class SizeMismatchError(ValueError):
    pass


# -- benchmark ---------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkSpec:
    n_train_queries: int = 200
    n_test_queries: int = 200
    n_items: int = 2000
    rank: int = 8
    dim: int = 16
    sigma: float = 0.1
    base_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dim < self.rank:
            raise ValueError("dim must be >= rank")
        if self.n_test_queries < 1:
            raise ValueError("need at least one test query")

    @property
    def oracle(self) -> SyntheticOracleSpec:
        return SyntheticOracleSpec(
            n_queries=self.n_train_queries + self.n_test_queries,
            n_items=self.n_items,
            rank=self.rank,
            sigma=self.sigma,
            seed=self.seed,
        )


@dataclass
class DeskBenchmark:
    """Scorer, its latent factors lifted to ``dim`` dimensions, and noisy base embeddings.

    Query ids ``0..n_train-1`` are train queries, the rest are test queries.
    """

    spec: BenchmarkSpec
    scorer: SyntheticScorer
    true_query: EmbeddingMatrix
    true_item: EmbeddingMatrix
    base_query: EmbeddingMatrix
    base_item: EmbeddingMatrix

    @property
    def train_ids(self) -> np.ndarray:
        return np.arange(self.spec.n_train_queries)

    @property
    def test_ids(self) -> np.ndarray:
        s = self.spec
        return np.arange(s.n_train_queries, s.n_train_queries + s.n_test_queries)


def make_desk_benchmark(spec: BenchmarkSpec) -> DeskBenchmark:
    scorer = SyntheticScorer(spec.oracle)
    rng = np.random.default_rng([spec.seed, 1])
    # orthonormal lift keeps every dot product: (U P)(V P)^T == U V^T
    Q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.rank)))
    P = Q.T
    tq = scorer.query_factors @ P
    ti = scorer.item_factors @ P
    bq = tq + spec.base_noise * rng.standard_normal(tq.shape)
    bi = ti + spec.base_noise * rng.standard_normal(ti.shape)
    return DeskBenchmark(
        spec=spec,
        scorer=scorer,
        true_query=EmbeddingMatrix(tq, role="query"),
        true_item=EmbeddingMatrix(ti, role="item"),
        base_query=EmbeddingMatrix(bq, role="query"),
        base_item=EmbeddingMatrix(bi, role="item"),
    )


# -- indexing ----------------------------------------------------------------


@dataclass(frozen=True)
class IndexSpec:
    """Which item embeddings to search with.

    ``kind``: ``true`` (generating factors), ``base`` (noisy base
    embeddings), ``trns`` or ``ind`` (matrix factorization on a sparse
    score matrix built with ``strategy``/``k_d``).
    """

    kind: str = "trns"
    strategy: str = "q-topk"
    k_d: int = 100
    mf: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("true", "base", "trns", "ind"):
            raise ValueError(f"unknown index kind {self.kind!r}")


def build_index(bench: DeskBenchmark, index: IndexSpec, seed: int = 0):
    """Return ``(item_embeddings, test_query_param_embeddings, timings, info)``."""
    timings = dict.fromkeys(PHASES, 0.0)
    info: dict = {}
    test = bench.test_ids
    t = time.perf_counter()
    bq, bi = bench.base_query.data, bench.base_item.data
    timings["base_embeddings"] = time.perf_counter() - t
    if index.kind in ("true", "base"):
        V = bench.true_item if index.kind == "true" else bench.base_item
        return V, bq[test], timings, info

    train = bench.train_ids
    t = time.perf_counter()
    gspec = GBuildSpec(
        strategy=index.strategy,
        k_d=index.k_d,
        seed=seed,
        base_query_embs=EmbeddingMatrix(bq[train], role="query"),
        base_item_embs=bench.base_item,
    )
    ledger = BudgetLedger()
    G = build_sparse_matrix(gspec, bench.scorer, ledger)
    timings["compute_g"] = time.perf_counter() - t
    info["g_calls"] = ledger.used
    info["coverage"] = coverage_stats(G)

    t = time.perf_counter()
    mf = dict(index.mf)
    mf.setdefault("seed", seed)
    if index.kind == "trns":
        est = TransductiveMF(dim=bi.shape[1], **mf).fit(G, bq[train], bi)
        timings["train"] = time.perf_counter() - t
        return EmbeddingMatrix(est.item_embeddings_, role="item"), bq[test], timings, info
    est = InductiveMF(**mf).fit(G, bq[train], bi)
    timings["train"] = time.perf_counter() - t
    t = time.perf_counter()
    V = est.embed_items()
    timings["embed_items"] = time.perf_counter() - t
    return V, est.transform(bq[test], role="query"), timings, info


# -- metrics -----------------------------------------------------------------


def topk_recall_at_m(gold: TopKList, retrieved: TopKList) -> float:
    """Fraction of the gold top-k ids present in the first k retrieved ids."""
    k = gold.k
    if len(gold) != k:
        raise SizeMismatchError(f"gold list holds {len(gold)} items, expected k={k}")
    got = set(retrieved.ids[:k])
    return len(got.intersection(gold.ids)) / k


def make_gold(
    scorer: Scorer,
    queries: Sequence[int],
    k: int,
    n_items: int | None = None,
    cache_path=None,
) -> dict[int, TopKList]:
    """Exact top-``k`` per query, optionally cached as JSON at ``cache_path``."""
    queries = [int(q) for q in queries]
    if cache_path is not None and Path(cache_path).exists():
        doc = json.loads(Path(cache_path).read_text())
        cached = doc.get("gold", {})
        if doc.get("k") == k and all(str(q) in cached for q in queries):
            return {q: TopKList(k, tuple(map(tuple, cached[str(q)]))) for q in queries}
    gold = {q: brute_force_knn(scorer, q, k, n_items) for q in queries}
    if cache_path is not None:
        doc = {"k": k, "gold": {str(q): [list(p) for p in g.items] for q, g in gold.items()}}
        Path(cache_path).write_text(json.dumps(doc))
    return gold


# -- experiment --------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    """A named search method: ``axn``, ``rnr``, ``tour`` or ``exact`` plus its options."""

    name: str
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("axn", "rnr", "tour", "exact"):
            raise ValueError(f"unknown method kind {self.kind!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "MethodSpec":
        doc = dict(doc)
        name = doc.pop("name")
        kind = doc.pop("kind", name)
        return cls(name, kind, doc)


@dataclass(frozen=True)
class ExperimentSpec:
    benchmark: BenchmarkSpec = BenchmarkSpec()
    index: IndexSpec = IndexSpec()
    methods: tuple = ()
    budgets: tuple = (100,)
    k_values: tuple = (1,)
    n_test_queries: int | None = None
    seeds: tuple = (0,)
    timers: bool = True
    workers: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        if not self.budgets or not self.k_values:
            raise ValueError("budgets and k_values must be non-empty")
        if max(self.k_values) > min(self.budgets):
            raise ValueError("every k must be <= every budget")
        if self.n_test_queries is not None and not 1 <= self.n_test_queries <= self.benchmark.n_test_queries:
            raise ValueError("n_test_queries out of range")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        known = {"benchmark", "index", "methods", "budgets", "k_values", "n_test_queries", "seeds", "timers", "workers"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(
            benchmark=BenchmarkSpec(**doc.get("benchmark", {})),
            index=IndexSpec(**doc.get("index", {})),
            methods=tuple(MethodSpec.from_dict(m) for m in doc.get("methods", ())),
            budgets=tuple(doc.get("budgets", (100,))),
            k_values=tuple(doc.get("k_values", (1,))),
            n_test_queries=doc.get("n_test_queries"),
            seeds=tuple(doc.get("seeds", (0,))),
            timers=doc.get("timers", True),
            workers=doc.get("workers", 1),
        )

    def to_dict(self) -> dict:
        return {
            "benchmark": asdict(self.benchmark),
            "index": asdict(self.index),
            "methods": [{"name": m.name, "kind": m.kind, **m.options} for m in self.methods],
            "budgets": list(self.budgets),
            "k_values": list(self.k_values),
            "n_test_queries": self.n_test_queries,
            "seeds": list(self.seeds),
            "timers": self.timers,
            "workers": self.workers,
        }


@dataclass(frozen=True)
class ReportRow:
    method: str
    k: int
    m: int
    recall_mean: float
    recall_stderr: float
    calls_used: float
    n_queries: int


@dataclass
class RecallReport:
    rows: list
    timings: dict = field(default_factory=dict)
    index_info: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def index_seconds_total(self) -> float:
        return float(sum(self.timings.values()))

    def get(self, method: str, k: int, m: int) -> ReportRow:
        for r in self.rows:
            if (r.method, r.k, r.m) == (method, k, m):
                return r
        raise KeyError((method, k, m))

    def to_dict(self, include_timing: bool = True) -> dict:
        doc = {
            "rows": [asdict(r) for r in self.rows],
            "index_info": self.index_info,
            "provenance": self.provenance,
        }
        if include_timing:
            doc["timings"] = dict(self.timings)
            doc["index_seconds_total"] = self.index_seconds_total
        return doc


def _mean_stderr(xs: Sequence[float]) -> tuple[float, float]:
    n = len(xs)
    mean = math.fsum(xs) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1)
    return mean, math.sqrt(var / n)


def run_method(method: MethodSpec, m: int, V, scorer: Scorer, queries, u_params, k: int, seed: int = 0, workers: int = 1):
    """Search every query with one method at budget ``m``; results in query order."""
    opts = dict(method.options)

    def one(j):
        q = int(queries[j])
        u = None if u_params is None else u_params[j]
        if method.kind == "axn":
            cfg = AxnConfig(budget=m, seed=opts.get("seed", seed), **{k_: v for k_, v in opts.items() if k_ != "seed"})
            return axn_search(cfg, V, scorer, q, k, u_param=u)
        if method.kind == "rnr":
            return rnr_search(V, scorer, q, u, m, k)
        if method.kind == "tour":
            return tour_search(TourConfig(budget=m, **opts), V, scorer, q, k, u)
        raise ValueError(f"{method.kind} is not a budgeted method")

    idx = range(len(queries))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, idx))
    return [one(j) for j in idx]


def evaluate_methods(
    methods: Sequence[MethodSpec],
    budgets: Sequence[int],
    k_values: Sequence[int],
    V,
    scorer: Scorer,
    queries,
    u_params,
    gold: dict,
    n_items: int,
    seed: int = 0,
    workers: int = 1,
    acc: dict | None = None,
) -> dict:
    """Accumulate per-query recalls and call counts into ``acc[(method, k, m)]``."""
    acc = {} if acc is None else acc
    kmax = max(k_values)
    for method in methods:
        for m in ([n_items] if method.kind == "exact" else budgets):
            if method.kind == "exact":
                results = [brute_force_knn(scorer, int(q), kmax, n_items) for q in queries]
                used = [n_items] * len(queries)
            else:
                res = run_method(method, m, V, scorer, queries, u_params, kmax, seed, workers)
                results = [r.topk for r in res]
                used = [r.calls_used for r in res]
            for k in k_values:
                recalls, calls = acc.setdefault((method.name, k, m), ([], []))
                recalls.extend(topk_recall_at_m(gold[int(q)].truncate(k), r) for q, r in zip(queries, results))
                calls.extend(used)
    return acc


def summarize(acc: dict) -> list[ReportRow]:
    rows = []
    for key in sorted(acc):
        recalls, calls = acc[key]
        mean, se = _mean_stderr(recalls)
        rows.append(ReportRow(key[0], key[1], key[2], mean, se, math.fsum(calls) / len(calls), len(recalls)))
    return rows


def run_experiment(spec: ExperimentSpec) -> RecallReport:
    kmax = max(spec.k_values)
    acc: dict = {}
    timings = dict.fromkeys(PHASES, 0.0)
    infos = []
    for seed in spec.seeds:
        bench = make_desk_benchmark(replace(spec.benchmark, seed=seed))
        V, u_params, t, info = build_index(bench, spec.index, seed=seed)
        for ph, sec in t.items():
            timings[ph] += sec
        infos.append({"seed": seed, **info})
        n_test = spec.n_test_queries or len(bench.test_ids)
        queries = bench.test_ids[:n_test]
        gold = make_gold(bench.scorer, queries, kmax)
        log.info("seed %d: index %s ready, %d test queries", seed, spec.index.kind, n_test)
        evaluate_methods(
            spec.methods, spec.budgets, spec.k_values, V, bench.scorer, queries,
            u_params[:n_test], gold, bench.spec.n_items, seed, spec.workers, acc,
        )
    return RecallReport(rows=summarize(acc), timings=timings if spec.timers else {}, index_info=infos)


CSV_COLUMNS = ("method", "k", "m", "recall_mean", "recall_stderr", "calls_used", "index_seconds_total")


def emit_plotdata(report: RecallReport, path) -> None:
    """Write ``path`` as CSV (sorted by method, k, m) and a JSON mirror next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(report.rows, key=lambda r: (r.method, r.k, r.m))
    total = report.index_seconds_total
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.k, r.m, repr(r.recall_mean), repr(r.recall_stderr), repr(r.calls_used), repr(total)])
    path.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
