"""``axn`` command line entry point.

Exit status: 0 on success, 1 on a runtime failure, 2 on a bad config or
bad arguments.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import pipeline
from .core import (
    AxnError,
    embeddings_from_csv,
    embeddings_to_csv,
    load_embeddings,
    load_sparse,
    save_embeddings,
    save_sparse,
    sparse_from_csv,
    sparse_to_csv,
)
from .evalharness import BenchmarkSpec, ExperimentSpec, emit_plotdata, run_experiment
from .factorize import InductiveMF, TransductiveMF, save_model
from .gbuilder import GBuildSpec, build_sparse_matrix, coverage_stats, normalizer_from_g
from .pipeline import ConfigError, version_and_provenance
from .retrieve import AxnConfig, axn_search
from .scorer import BudgetLedger, scorer_from_spec

log = logging.getLogger("axn")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


@contextlib.contextmanager
def config_phase():
    """Anything raised while reading arguments or configs counts as a config error."""
    try:
        yield
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from exc


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_ids(text: str) -> np.ndarray:
    """Ids from a file, a ``start:stop`` range or a comma list."""
    p = Path(text)
    if p.is_file():
        return np.array(p.read_text().split(), dtype=np.int64)
    if ":" in text:
        a, b = text.split(":")
        return np.arange(int(a), int(b))
    return np.array([int(t) for t in text.split(",") if t.strip()], dtype=np.int64)


def _dump(doc, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


# -- subcommands ---------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    with config_phase():
        doc = _read_json(args.spec)
        gbuild = doc.pop("gbuild", None)
        gold_k = doc.pop("gold_k", 100)
        spec = BenchmarkSpec(**doc)
    stats = pipeline.materialize_benchmark(spec, args.out, gold_k=gold_k, gbuild=gbuild)
    if stats:
        print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_build_g(args) -> int:
    with config_phase():
        bq = load_embeddings(args.queries)
        bi = load_embeddings(args.items)
        spec = GBuildSpec(args.strategy, args.kd, seed=args.seed, base_query_embs=bq, base_item_embs=bi,
                          batch_size=args.batch_size)
        scorer = scorer_from_spec(args.scorer)
    with scorer:
        g = build_sparse_matrix(spec, scorer, BudgetLedger(args.budget), workers=args.workers)
    if args.normalize:
        n = normalizer_from_g(g, bq, bi)
        g = g.with_scores(n.transform(g.scores))
        _dump(n.to_dict(), Path(args.out).with_suffix(".normalizer.json"))
    save_sparse(g, args.out)
    print(json.dumps(coverage_stats(g), sort_keys=True))
    return EXIT_OK


def cmd_train_mf(args) -> int:
    with config_phase():
        g = load_sparse(args.g)
        q = load_embeddings(args.init_q)
        i = load_embeddings(args.init_i)
        common = dict(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                      tol=args.tol, max_wall_seconds=args.max_wall_seconds)
        if args.kind == "trns":
            est = TransductiveMF(dim=args.dim or i.dim, **common)
        else:
            if args.dim not in (None, i.dim):
                raise ConfigError("inductive towers keep the base dimension; drop --dim or match it")
            est = InductiveMF(**common)
    est.fit(g, q, i)
    save_model(est.to_model(), args.out)
    log.info("train-mf final loss %.6g after %d epochs", est.loss_history_[-1], est.n_epochs_run_)
    return EXIT_OK


def _load_rankings(spec: str):
    path = Path(spec)
    if path.suffix == ".json":
        doc = _read_json(path)
        if isinstance(doc, list):
            return lambda q: doc
        return lambda q: doc[str(q)]
    ids = path.read_text().split()
    return lambda q: [int(t) for t in ids]


def cmd_search(args) -> int:
    with config_phase():
        V = load_embeddings(args.items).data
        init, rankings = args.init, None
        if init.startswith("ranking:"):
            rankings = _load_rankings(init.partition(":")[2])
            init = "ranking"
        cfg = AxnConfig(budget=args.budget, rounds=args.rounds, k_s=args.k_s, lam=args.lam, init=init,
                        shortlist_size=args.shortlist, pinv_tolerance=args.pinv_tolerance, seed=args.seed)
        U = None
        qpath = Path(args.queries)
        if qpath.is_file() and qpath.read_bytes()[:4] == b"AXNE":
            U = load_embeddings(qpath).data
            ids = parse_ids(args.query_ids) if args.query_ids else np.arange(U.shape[0])
            if len(ids) != U.shape[0]:
                raise ConfigError(f"{len(ids)} query ids for {U.shape[0]} query embeddings")
        else:
            ids = parse_ids(args.queries)
        scorer = scorer_from_spec(args.scorer)
    out = {}
    with scorer:
        for j, q in enumerate(ids):
            res = axn_search(cfg, V, scorer, int(q), args.k, u_param=None if U is None else U[j],
                             init_ranking=None if rankings is None else rankings(int(q)))
            out[str(int(q))] = res.to_dict()
    _dump({"config": asdict(cfg), "scorer": args.scorer, "queries": out}, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    with config_phase():
        doc = _read_json(args.spec)
        spec = ExperimentSpec.from_dict(doc)
        if args.workers > 1:
            spec = replace(spec, workers=args.workers)
    report = run_experiment(spec)
    report.provenance = version_and_provenance(spec.to_dict(), {"seeds": list(spec.seeds)}, [args.spec])
    emit_plotdata(report, Path(args.out) / "report.csv")
    return EXIT_OK


def _apply_overrides(doc: dict, sets) -> dict:
    for item in sets or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        *path, last = key.split(".")
        node = doc
        for part in path:
            node = node.setdefault(part, {})
        node[last] = value
    return doc


def cmd_pipeline(args) -> int:
    with config_phase():
        doc = _read_json(args.config) if args.config else {}
        if args.seed is not None:
            doc["seed"] = args.seed
        cfg = pipeline.load_config(_apply_overrides(doc, args.set))
    report = pipeline.Pipeline(cfg, args.workdir, force=args.force, workers=args.workers).run()
    print(Path(args.workdir, "report", "report.csv"))
    log.info("pipeline done: %d report rows", len(report["rows"]))
    return EXIT_OK


def cmd_convert(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    with config_phase():
        if src.suffix == ".csv" and dst.suffix == ".csv":
            raise ConfigError("one side of convert must be a binary file")
    if src.suffix == ".csv":
        if dst.suffix == ".axng" or args.kind == "g":
            save_sparse(sparse_from_csv(src, args.n_queries, args.n_items), dst)
        else:
            save_embeddings(embeddings_from_csv(src, role=args.role), dst)
        return EXIT_OK
    magic = src.read_bytes()[:4]
    if magic == b"AXNG":
        sparse_to_csv(load_sparse(src), dst)
    else:
        embeddings_to_csv(load_embeddings(src), dst)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="axn", description="Budgeted k-NN search with an expensive scorer.")
    p.add_argument("--workers", type=int, default=1, help="cap on worker threads")
    p.add_argument("--log-level", default="INFO")
    p.add_argument("--version", action="version", version=f"%(prog)s {pipeline.tool_version()}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", help="materialize the synthetic desk benchmark")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth_gen)

    s = sub.add_parser("build-g", help="score a sparse query x item matrix")
    s.add_argument("--strategy", choices=("q-topk", "q-random", "i-topk"), default="q-topk")
    s.add_argument("--kd", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--queries", required=True)
    s.add_argument("--items", required=True)
    s.add_argument("--scorer", required=True)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--budget", type=int, default=None)
    s.add_argument("--normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_build_g)

    s = sub.add_parser("train-mf", help="fit item embeddings to a sparse score matrix")
    s.add_argument("--kind", choices=("trns", "ind"), default="trns")
    s.add_argument("--g", required=True)
    s.add_argument("--init-q", required=True)
    s.add_argument("--init-i", required=True)
    s.add_argument("--dim", type=int, default=None)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--max-wall-seconds", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_mf)

    s = sub.add_parser("search", help="run adaptive retrieval for a set of queries")
    s.add_argument("--items", required=True)
    s.add_argument("--scorer", required=True)
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--rounds", type=int, default=5)
    s.add_argument("--k-s", type=int, default=None)
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--init", default="random", help="random, emb or ranking:<file>")
    s.add_argument("--shortlist", type=int, default=None)
    s.add_argument("--pinv-tolerance", type=float, default=1e-10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--queries", required=True, help="query embedding file or id list")
    s.add_argument("--query-ids", default=None, help="ids for the rows of an embedding file")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_search)

    s = sub.add_parser("eval", help="run a recall experiment")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("pipeline", help="synth-gen -> build-g -> train-mf -> search -> eval")
    s.add_argument("--config", default=None)
    s.add_argument("--workdir", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("convert", help="convert between CSV and binary files")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--kind", choices=("emb", "g"), default=None)
    s.add_argument("--role", choices=("query", "item"), default="item")
    s.add_argument("--n-queries", type=int, default=None)
    s.add_argument("--n-items", type=int, default=None)
    s.set_defaults(fn=cmd_convert)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s %(message)s",
                        stream=sys.stderr)
    if args.workers < 1:
        print("axn: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"axn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AxnError, OSError, ValueError, ArithmeticError) as exc:
        print(f"axn: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
