import json
import os
import subprocess
import sys
import time

import pytest

from axn.cli import main, parse_ids
from axn.core import load_embeddings, load_sparse
from axn.pipeline import (
    ConfigError,
    Pipeline,
    derive_seed,
    load_config,
    run_pipeline,
    strip_timing,
    version_and_provenance,
)

TINY = {
    "seed": 3,
    "corpus": {"n_train_queries": 30, "n_test_queries": 10, "n_items": 150, "rank": 3, "dim": 6},
    "gbuild": {"k_d": 15},
    "mf": {"epochs": 3},
    "search": {"budget": 30, "k": 5},
    "eval": {"methods": [{"name": "axn", "kind": "axn", "init": "emb"}, {"name": "rnr", "kind": "rnr"}],
             "budgets": [20, 30], "k_values": [1, 5]},
}


# -- config ----------------------------------------------------------------------


def test_defaults_fill_in():
    cfg = load_config({})
    assert cfg["search"]["rounds"] == 5 and cfg["search"]["lambda"] == 0.0
    assert cfg["gbuild"]["k_d"] == 100 and cfg["search"]["pinv_tolerance"] == 1e-10


@pytest.mark.parametrize(
    "doc",
    [
        {"search": {"lambda": 1.5}},
        {"bogus": 1},
        {"mf": {"kind": "deep"}},
        {"corpus": {"n_items": 10}, "gbuild": {"k_d": 20}},
        {"search": {"budget": 5, "k": 10}},
        {"eval": {"budgets": [5], "k_values": [10]}},
        {"search": {"unknown": 1}},
    ],
)
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        load_config(doc)


def test_provenance_hash():
    a = version_and_provenance(load_config(TINY))
    b = version_and_provenance(load_config(TINY))
    c = version_and_provenance(load_config({**TINY, "seed": 4}))
    assert a["config_hash"] == b["config_hash"] != c["config_hash"]
    assert {"tool", "version", "config_hash", "seeds", "files"} <= set(a)


def test_stage_seeds_distinct_and_stable():
    assert derive_seed(0, "train-mf") == derive_seed(0, "train-mf")
    assert derive_seed(0, "train-mf") != derive_seed(0, "search")
    assert derive_seed(0, "search") != derive_seed(1, "search")


# -- pipeline --------------------------------------------------------------------


def test_pipeline_end_to_end_and_skip(tmp_path):
    report = run_pipeline(TINY, tmp_path)
    assert (tmp_path / "report" / "report.csv").exists()
    assert "provenance" in report and len(report["rows"]) == 2 * 2 * 2
    results = json.loads((tmp_path / "results.json").read_text())
    assert len(results["queries"]) == 10
    for r in results["queries"].values():
        assert r["calls_used"] <= 30 and len(r["topk"]) == 5 and len(r["per_round_trace"]) == 5

    p = Pipeline(load_config(TINY), tmp_path)
    p.run()
    assert p.skipped == ["synth-gen", "build-g", "train-mf", "search", "eval"]
    forced = Pipeline(load_config(TINY), tmp_path, force=True)
    forced.run()
    assert forced.skipped == []


def test_pipeline_reruns_downstream_of_change(tmp_path):
    run_pipeline(TINY, tmp_path)
    changed = json.loads(json.dumps(TINY))
    changed["search"]["budget"] = 25
    p = Pipeline(load_config(changed), tmp_path)
    p.run()
    assert p.skipped == ["synth-gen", "build-g", "train-mf", "eval"]


def test_pipeline_notices_touched_input(tmp_path):
    run_pipeline(TINY, tmp_path)
    g = tmp_path / "g.axng"
    os.utime(g, (time.time() + 5, time.time() + 5))
    p = Pipeline(load_config(TINY), tmp_path)
    p.run()
    assert "train-mf" not in p.skipped and "build-g" in p.skipped


def test_pipeline_normalized_inductive(tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["scorer"] = {"normalize": True, "normalize_queries": 10}
    doc["mf"]["kind"] = "ind"
    report = run_pipeline(doc, tmp_path)
    norm = json.loads((tmp_path / "normalizer.json").read_text())
    assert norm["beta"] > 0
    assert all(0.0 <= r["recall_mean"] <= 1.0 for r in report["rows"])


def test_pipeline_deterministic(tmp_path):
    a = run_pipeline(TINY, tmp_path / "a")
    b = run_pipeline(TINY, tmp_path / "b")
    assert json.dumps(strip_timing(a), sort_keys=True) == json.dumps(strip_timing(b), sort_keys=True)


# -- command line ----------------------------------------------------------------


def test_parse_ids(tmp_path):
    assert parse_ids("3:6").tolist() == [3, 4, 5]
    assert parse_ids("1,4").tolist() == [1, 4]
    f = tmp_path / "ids.txt"
    f.write_text("7\n8 9\n")
    assert parse_ids(str(f)).tolist() == [7, 8, 9]


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    spec = d / "synth.json"
    spec.write_text(json.dumps({"n_train_queries": 30, "n_test_queries": 8, "n_items": 120, "rank": 3, "dim": 6,
                                "seed": 1, "gbuild": {"k_d": 12}, "gold_k": 5}))
    assert main(["--log-level", "WARNING", "synth-gen", "--spec", str(spec), "--out", str(d / "bench")]) == 0
    return d


def test_synth_gen_outputs(bench):
    b = bench / "bench"
    assert load_sparse(b / "g.axng").nnz == 30 * 12
    assert load_embeddings(b / "base_test_queries.axne").rows == 8
    assert len(json.loads((b / "gold.json").read_text())["gold"]) == 8


def test_build_train_search_chain(bench, capsys):
    b = bench / "bench"
    capsys.readouterr()
    rc = main(["build-g", "--strategy", "q-random", "--kd", "10", "--seed", "2",
               "--queries", str(b / "base_train_queries.axne"), "--items", str(b / "base_items.axne"),
               "--scorer", f"synth:{b / 'oracle.json'}", "--out", str(bench / "g.axng")])
    assert rc == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["mean"] == pytest.approx(30 * 10 / 120)
    rc = main(["train-mf", "--kind", "trns", "--g", str(bench / "g.axng"), "--init-q", str(b / "base_train_queries.axne"),
               "--init-i", str(b / "base_items.axne"), "--epochs", "2", "--out", str(bench / "model")])
    assert rc == 0
    rc = main(["search", "--items", str(bench / "model" / "item_embeddings.axne"),
               "--scorer", f"synth:{b / 'oracle.json'}", "--budget", "20", "--rounds", "4", "--lambda", "0.5",
               "--init", "emb", "--k", "3", "--queries", str(b / "base_test_queries.axne"), "--query-ids", "30:38",
               "--out", str(bench / "results.json")])
    assert rc == 0
    res = json.loads((bench / "results.json").read_text())["queries"]
    assert sorted(map(int, res)) == list(range(30, 38))
    assert all(r["calls_used"] == 20 for r in res.values())


def test_search_ranking_init(bench, tmp_path):
    b = bench / "bench"
    ranking = tmp_path / "rank.txt"
    ranking.write_text(" ".join(map(str, range(119, -1, -1))))
    out = tmp_path / "r.json"
    rc = main(["search", "--items", str(b / "true_items.axne"), "--scorer", f"synth:{b / 'oracle.json'}",
               "--budget", "10", "--rounds", "2", "--init", f"ranking:{ranking}", "--k", "2", "--queries", "30,31",
               "--out", str(out)])
    assert rc == 0
    trace = json.loads(out.read_text())["queries"]["30"]["per_round_trace"]
    assert trace[0]["new_items"] == [119, 118, 117, 116, 115]


def test_eval_command(tmp_path):
    spec = tmp_path / "exp.json"
    spec.write_text(json.dumps({"benchmark": {"n_train_queries": 20, "n_test_queries": 10, "n_items": 100,
                                              "rank": 3, "dim": 6},
                                "index": {"kind": "base"}, "methods": [{"name": "rnr", "kind": "rnr"}],
                                "budgets": [10, 20], "k_values": [1]}))
    assert main(["eval", "--spec", str(spec), "--out", str(tmp_path / "rep")]) == 0
    doc = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert len(doc["rows"]) == 2 and doc["provenance"]["config_hash"]


def test_convert_roundtrip(bench, tmp_path):
    b = bench / "bench"
    assert main(["convert", str(b / "g.axng"), str(tmp_path / "g.csv")]) == 0
    assert main(["convert", str(tmp_path / "g.csv"), str(tmp_path / "g.axng"), "--n-queries", "30",
                 "--n-items", "120"]) == 0
    assert (tmp_path / "g.axng").read_bytes() == (b / "g.axng").read_bytes()
    assert main(["convert", str(b / "base_items.axne"), str(tmp_path / "e.csv")]) == 0
    assert main(["convert", str(tmp_path / "e.csv"), str(tmp_path / "e.axne")]) == 0
    assert (tmp_path / "e.axne").read_bytes() == (b / "base_items.axne").read_bytes()


def test_exit_codes(bench, tmp_path):
    b = bench / "bench"
    assert main(["pipeline", "--workdir", str(tmp_path / "w"), "--set", "search.lambda=1.5"]) == 2
    assert not (tmp_path / "w").exists()
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pipeline", "--workdir", str(tmp_path / "w"), "--config", str(bad)]) == 2
    assert main(["search", "--items", str(tmp_path / "missing.axne"), "--scorer", "synth:x", "--budget", "5",
                 "--k", "1", "--queries", "1", "--out", str(tmp_path / "r.json")]) == 2
    die = f"exec:{sys.executable} -m axn.echo_scorer --die-after 0"
    assert main(["search", "--items", str(b / "base_items.axne"), "--scorer", die, "--budget", "5", "--k", "1",
                 "--queries", "1", "--out", str(tmp_path / "r.json")]) == 1
    assert main(["search", "--items", str(b / "base_items.axne"), "--scorer", "synth:" + str(b / "oracle.json"),
                 "--budget", "5", "--k", "1", "--queries", "9999", "--out", str(tmp_path / "r.json")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["search"])
    assert exc.value.code == 2


def test_pipeline_command_with_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    rc = main(["--workers", "2", "pipeline", "--config", str(cfg), "--workdir", str(tmp_path / "w"),
               "--set", "search.budget=25", "--seed", "5"])
    assert rc == 0
    prov = json.loads((tmp_path / "w" / "report" / "report.json").read_text())["provenance"]
    assert prov["seeds"]["top"] == 5


def test_console_script_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "axn.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("axn ")
