"""Declarative end-to-end runs: synthetic corpus -> G -> MF -> search -> eval.

A pipeline config is one JSON document; every stage writes its artifacts
under a work directory and a stamp recording what it was built from, so
an unchanged rerun skips every stage.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
import zlib
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import jsonschema
import numpy as np

from .core import AxnError, EmbeddingMatrix, load_embeddings, load_sparse, save_embeddings, save_sparse
from .evalharness import (
    BenchmarkSpec,
    MethodSpec,
    RecallReport,
    emit_plotdata,
    evaluate_methods,
    make_desk_benchmark,
    make_gold,
    summarize,
)
from .factorize import InductiveMF, TransductiveMF, save_model
from .gbuilder import GBuildSpec, build_sparse_matrix, coverage_stats, normalizer_from_g
from .retrieve import AxnConfig, axn_search
from .scorer import BudgetLedger, NormalizedScorer, ScoreNormalizer, SyntheticScorer, SyntheticOracleSpec

log = logging.getLogger(__name__)

TOOL_NAME = "axn"


class ConfigError(AxnError):
    pass


class StageFailure(AxnError):
    pass


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


_num = {"type": "number"}
_int = {"type": "integer"}
_nullable_int = {"type": ["integer", "null"]}
_nullable_num = {"type": ["number", "null"]}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


_METHOD = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "kind": {"enum": ["axn", "rnr", "tour", "exact"]},
        "rounds": {**_int, "minimum": 1},
        "k_s": _nullable_int,
        "lam": {**_num, "minimum": 0, "maximum": 1},
        "init": {"enum": ["random", "emb"]},
        "shortlist_size": _nullable_int,
        "pinv_tolerance": {**_num, "minimum": 0},
        "variant": {"enum": ["mse", "ce"]},
        "learning_rate": _nullable_num,
        "temperature": {**_num, "exclusiveMinimum": 0},
    },
    "required": ["name"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {**_int, "minimum": 0},
        "corpus": _section({
            "n_train_queries": {**_int, "minimum": 1},
            "n_test_queries": {**_int, "minimum": 1},
            "n_items": {**_int, "minimum": 1},
            "rank": {**_int, "minimum": 1},
            "dim": {**_int, "minimum": 1},
            "sigma": {**_num, "minimum": 0},
            "base_noise": {**_num, "minimum": 0},
        }),
        "scorer": _section({
            "normalize": {"type": "boolean"},
            "normalize_queries": {**_int, "minimum": 1},
        }),
        "gbuild": _section({
            "strategy": {"enum": ["q-topk", "q-random", "i-topk"]},
            "k_d": {**_int, "minimum": 1},
            "batch_size": {**_int, "minimum": 1},
        }),
        "mf": _section({
            "kind": {"enum": ["trns", "ind"]},
            "learning_rate": {**_num, "minimum": 0},
            "epochs": {**_int, "minimum": 0},
            "batch_size": {**_int, "minimum": 1},
            "optimizer": {"enum": ["adam", "sgd"]},
            "weight_decay": {**_num, "minimum": 0},
            "tol": _nullable_num,
            "max_wall_seconds": _nullable_num,
        }),
        "search": _section({
            "budget": {**_int, "minimum": 1},
            "rounds": {**_int, "minimum": 1},
            "k_s": _nullable_int,
            "lambda": {**_num, "minimum": 0, "maximum": 1},
            "init": {"enum": ["random", "emb"]},
            "k": {**_int, "minimum": 1},
            "pinv_tolerance": {**_num, "minimum": 0},
            "shortlist_size": _nullable_int,
        }),
        "eval": _section({
            "methods": {"type": "array", "items": _METHOD, "minItems": 1},
            "budgets": {"type": "array", "items": {**_int, "minimum": 1}, "minItems": 1},
            "k_values": {"type": "array", "items": {**_int, "minimum": 1}, "minItems": 1},
        }),
    },
}

DEFAULTS = {
    "seed": 0,
    "corpus": {k: v for k, v in asdict(BenchmarkSpec()).items() if k != "seed"},
    "scorer": {"normalize": False, "normalize_queries": 100},
    "gbuild": {"strategy": "q-topk", "k_d": 100, "batch_size": 64},
    "mf": {
        "kind": "trns",
        "learning_rate": 1e-3,
        "epochs": 20,
        "batch_size": 256,
        "optimizer": "adam",
        "weight_decay": 0.0,
        "tol": None,
        "max_wall_seconds": None,
    },
    "search": {
        "budget": 100,
        "rounds": 5,
        "k_s": None,
        "lambda": 0.0,
        "init": "emb",
        "k": 10,
        "pinv_tolerance": 1e-10,
        "shortlist_size": None,
    },
    "eval": {
        "methods": [{"name": "axn", "kind": "axn", "init": "emb"}, {"name": "rnr", "kind": "rnr"}],
        "budgets": [100],
        "k_values": [1, 10],
    },
}


def load_config(doc: dict) -> dict:
    """Validate ``doc`` and fill in defaults; raises :class:`ConfigError`."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in doc.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    try:
        BenchmarkSpec(**cfg["corpus"])
        s = cfg["search"]
        AxnConfig(budget=s["budget"], rounds=s["rounds"], k_s=s["k_s"], lam=s["lambda"],
                  init=s["init"], shortlist_size=s["shortlist_size"], pinv_tolerance=s["pinv_tolerance"])
        if max(cfg["eval"]["k_values"]) > min(cfg["eval"]["budgets"]):
            raise ValueError("every eval k must be <= every eval budget")
        if cfg["search"]["k"] > cfg["search"]["budget"]:
            raise ValueError("search.k exceeds search.budget")
        corpus = cfg["corpus"]
        if cfg["gbuild"]["k_d"] > corpus["n_items"]:
            raise ValueError("gbuild.k_d exceeds n_items")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def derive_seed(seed: int, stage: str) -> int:
    """Stage seed expanded from the top-level seed; stable across runs and platforms."""
    ss = np.random.SeedSequence([seed, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_and_provenance(cfg: dict, seeds: dict | None = None, files=()) -> dict:
    """Tool version, config hash, seeds and content hashes of ``files``."""
    return {
        "tool": TOOL_NAME,
        "version": tool_version(),
        "config_hash": canonical_hash(cfg),
        "seeds": dict(seeds or {}),
        "files": {Path(f).name: file_sha256(f) for f in sorted(map(str, files))},
    }


STAGES = ("synth-gen", "build-g", "train-mf", "search", "eval")


class Pipeline:
    """Runs the stages of one config inside ``workdir``."""

    def __init__(self, cfg: dict, workdir, force: bool = False, workers: int = 1):
        self.cfg = cfg
        self.dir = Path(workdir)
        self.force = force
        self.workers = workers
        seed = cfg["seed"]
        self.seeds = {"top": seed, **{s: derive_seed(seed, s) for s in STAGES}}
        self.timings: dict[str, float] = {}
        self.skipped: list[str] = []

    # paths
    def p(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def _stamp_path(self, stage: str) -> Path:
        return self.p(".stamps", f"{stage}.json")

    def _stamp(self, stage: str, params, inputs) -> dict:
        return {"params": canonical_hash(params), "inputs": {str(i): file_sha256(i) for i in inputs}}

    def _fresh(self, stage: str, params, inputs, outputs) -> bool:
        sp = self._stamp_path(stage)
        if self.force or not sp.exists() or not all(Path(o).exists() for o in outputs):
            return False
        if json.loads(sp.read_text()) != self._stamp(stage, params, inputs):
            return False
        newest_in = max((Path(i).stat().st_mtime for i in inputs), default=0.0)
        return all(Path(o).stat().st_mtime >= newest_in for o in outputs)

    def _run_stage(self, stage: str, params, inputs, outputs, fn):
        if self._fresh(stage, params, inputs, outputs):
            log.info("stage=%s status=skipped", stage)
            self.skipped.append(stage)
            return
        t = time.perf_counter()
        try:
            fn()
        except (AxnError, ValueError, OSError) as exc:
            raise StageFailure(f"stage {stage} failed: {exc}") from exc
        self.timings[stage] = time.perf_counter() - t
        self._stamp_path(stage).parent.mkdir(parents=True, exist_ok=True)
        self._stamp_path(stage).write_text(json.dumps(self._stamp(stage, params, inputs)))
        log.info("stage=%s status=done seconds=%.3f", stage, self.timings[stage])

    # stage bodies
    def bench_spec(self) -> BenchmarkSpec:
        return BenchmarkSpec(**self.cfg["corpus"], seed=self.seeds["synth-gen"])

    def run(self) -> RecallReport:
        self.dir.mkdir(parents=True, exist_ok=True)
        bench_dir = self.p("bench")
        bench_files = [bench_dir / n for n in BENCH_FILES]
        self._run_stage(
            "synth-gen", {"corpus": self.cfg["corpus"], "seed": self.seeds["synth-gen"]}, [], bench_files,
            lambda: materialize_benchmark(self.bench_spec(), bench_dir, gold_k=max(self.cfg["eval"]["k_values"])),
        )
        g_path = self.p("g.axng")
        norm_path = self.p("normalizer.json")
        g_inputs = [bench_dir / "oracle.json", bench_dir / "base_train_queries.axne", bench_dir / "base_items.axne"]
        self._run_stage(
            "build-g", {"gbuild": self.cfg["gbuild"], "scorer": self.cfg["scorer"], "seed": self.seeds["build-g"]},
            g_inputs, [g_path, norm_path], lambda: self._build_g(bench_dir, g_path, norm_path),
        )
        model_dir = self.p("model")
        model_files = [model_dir / "item_embeddings.axne", model_dir / "test_query_embeddings.axne"]
        self._run_stage(
            "train-mf", {"mf": self.cfg["mf"], "seed": self.seeds["train-mf"]},
            [g_path, bench_dir / "base_train_queries.axne", bench_dir / "base_items.axne", bench_dir / "base_test_queries.axne"],
            model_files, lambda: self._train(bench_dir, g_path, model_dir),
        )
        results_path = self.p("results.json")
        self._run_stage(
            "search", {"search": self.cfg["search"], "seed": self.seeds["search"]},
            [*model_files, bench_dir / "oracle.json", norm_path], [results_path],
            lambda: self._search(bench_dir, model_dir, norm_path, results_path),
        )
        report_dir = self.p("report")
        self._run_stage(
            "eval", {"eval": self.cfg["eval"], "seed": self.seeds["eval"]},
            [*model_files, bench_dir / "oracle.json", bench_dir / "gold.json", norm_path],
            [report_dir / "report.json", report_dir / "report.csv"],
            lambda: self._eval(bench_dir, model_dir, norm_path, report_dir),
        )
        return json.loads((report_dir / "report.json").read_text())

    def _scorer(self, bench_dir, norm_path=None):
        doc = json.loads((bench_dir / "oracle.json").read_text())
        scorer = SyntheticScorer(SyntheticOracleSpec(**doc))
        if norm_path is not None:
            nd = json.loads(Path(norm_path).read_text())
            if nd.get("alpha") is not None:
                return NormalizedScorer(scorer, ScoreNormalizer.from_params(nd["alpha"], nd["beta"]))
        return scorer

    def _build_g(self, bench_dir, g_path, norm_path):
        gb = self.cfg["gbuild"]
        bq = load_embeddings(bench_dir / "base_train_queries.axne")
        bi = load_embeddings(bench_dir / "base_items.axne")
        spec = GBuildSpec(gb["strategy"], gb["k_d"], seed=self.seeds["build-g"], base_query_embs=bq,
                          base_item_embs=bi, batch_size=gb["batch_size"])
        ledger = BudgetLedger()
        g = build_sparse_matrix(spec, self._scorer(bench_dir), ledger, workers=self.workers)
        norm = {"alpha": None, "beta": None}
        if self.cfg["scorer"]["normalize"]:
            n = normalizer_from_g(g, bq, bi, self.cfg["scorer"]["normalize_queries"])
            g = g.with_scores(n.transform(g.scores))
            norm = n.to_dict()
        save_sparse(g, g_path)
        Path(norm_path).write_text(json.dumps(norm, sort_keys=True))
        log.info("build-g calls=%d coverage=%s", ledger.used, json.dumps(coverage_stats(g)))

    def _train(self, bench_dir, g_path, model_dir):
        mf = dict(self.cfg["mf"])
        kind = mf.pop("kind")
        g = load_sparse(g_path)
        bq = load_embeddings(bench_dir / "base_train_queries.axne")
        bi = load_embeddings(bench_dir / "base_items.axne")
        btest = load_embeddings(bench_dir / "base_test_queries.axne")
        seed = self.seeds["train-mf"]
        if kind == "trns":
            est = TransductiveMF(dim=bi.dim, seed=seed, **mf).fit(g, bq, bi)
            test_q = btest.data
        else:
            est = InductiveMF(seed=seed, **mf).fit(g, bq, bi)
            test_q = est.transform(btest.data, role="query")
        save_model(est.to_model(), model_dir)
        save_embeddings(EmbeddingMatrix(test_q, role="query"), model_dir / "test_query_embeddings.axne")

    def _test_ids(self, bench_dir) -> np.ndarray:
        return np.array(json.loads((bench_dir / "bench.json").read_text())["test_ids"], dtype=np.int64)

    def _search(self, bench_dir, model_dir, norm_path, results_path):
        s = self.cfg["search"]
        cfg = AxnConfig(budget=s["budget"], rounds=s["rounds"], k_s=s["k_s"], lam=s["lambda"], init=s["init"],
                        shortlist_size=s["shortlist_size"], pinv_tolerance=s["pinv_tolerance"],
                        seed=self.seeds["search"])
        V = load_embeddings(model_dir / "item_embeddings.axne").data
        U = load_embeddings(model_dir / "test_query_embeddings.axne").data
        scorer = self._scorer(bench_dir, norm_path)
        out = {}
        for j, q in enumerate(self._test_ids(bench_dir)):
            out[str(int(q))] = axn_search(cfg, V, scorer, int(q), s["k"], u_param=U[j]).to_dict()
        doc = {"config": asdict(cfg), "queries": out,
               "provenance": version_and_provenance(self.cfg, self.seeds, [model_dir / "item_embeddings.axne"])}
        Path(results_path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    def _eval(self, bench_dir, model_dir, norm_path, report_dir):
        e = self.cfg["eval"]
        V = load_embeddings(model_dir / "item_embeddings.axne").data
        U = load_embeddings(model_dir / "test_query_embeddings.axne").data
        scorer = self._scorer(bench_dir, norm_path)
        queries = self._test_ids(bench_dir)
        kmax = max(e["k_values"])
        gold = make_gold(self._scorer(bench_dir), queries, kmax, cache_path=bench_dir / "gold.json")
        methods = [MethodSpec.from_dict(m) for m in e["methods"]]
        acc = evaluate_methods(methods, e["budgets"], e["k_values"], V, scorer, queries, U, gold,
                               V.shape[0], self.seeds["eval"], self.workers)
        inputs = [bench_dir / n for n in BENCH_FILES] + [
            self.p("g.axng"), model_dir / "item_embeddings.axne", model_dir / "test_query_embeddings.axne"
        ]
        report = RecallReport(rows=summarize(acc), timings=dict(self.timings),
                              provenance=version_and_provenance(self.cfg, self.seeds, inputs))
        report_dir.mkdir(parents=True, exist_ok=True)
        emit_plotdata(report, report_dir / "report.csv")


BENCH_FILES = (
    "bench.json",
    "oracle.json",
    "base_train_queries.axne",
    "base_test_queries.axne",
    "base_items.axne",
    "true_queries.axne",
    "true_items.axne",
    "gold.json",
)


def materialize_benchmark(spec: BenchmarkSpec, out_dir, gold_k: int = 10, gbuild: dict | None = None) -> dict:
    """Write the desk benchmark's embeddings, scorer spec and gold labels to ``out_dir``.

    With ``gbuild`` (``strategy``, ``k_d``, optional ``batch_size``) the sparse
    score matrix over the train queries is written too, as ``g.axng``, and
    its coverage stats are returned.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = make_desk_benchmark(spec)
    train, test = bench.train_ids, bench.test_ids
    (out / "oracle.json").write_text(json.dumps(spec.oracle.to_dict(), sort_keys=True))
    (out / "bench.json").write_text(json.dumps(
        {"spec": asdict(spec), "train_ids": train.tolist(), "test_ids": test.tolist()}, sort_keys=True))
    save_embeddings(EmbeddingMatrix(bench.base_query.data[train], role="query"), out / "base_train_queries.axne")
    save_embeddings(EmbeddingMatrix(bench.base_query.data[test], role="query"), out / "base_test_queries.axne")
    save_embeddings(bench.base_item, out / "base_items.axne")
    save_embeddings(bench.true_query, out / "true_queries.axne")
    save_embeddings(bench.true_item, out / "true_items.axne")
    gold_path = out / "gold.json"
    if gold_path.exists():
        gold_path.unlink()
    make_gold(bench.scorer, test, gold_k, cache_path=gold_path)
    if gbuild is None:
        return {}
    gspec = GBuildSpec(
        gbuild.get("strategy", "q-topk"),
        gbuild.get("k_d", 100),
        seed=spec.seed,
        base_query_embs=EmbeddingMatrix(bench.base_query.data[train], role="query"),
        base_item_embs=bench.base_item,
        batch_size=gbuild.get("batch_size", 64),
    )
    g = build_sparse_matrix(gspec, bench.scorer)
    save_sparse(g, out / "g.axng")
    return coverage_stats(g)


def run_pipeline(doc: dict, workdir, force: bool = False, workers: int = 1) -> dict:
    cfg = load_config(doc)
    return Pipeline(cfg, workdir, force=force, workers=workers).run()


def strip_timing(report: dict) -> dict:
    """Report without wall-clock fields, for byte-level reproducibility checks."""
    return {k: v for k, v in report.items() if k not in ("timings", "index_seconds_total")}
