"""Re-measure the frozen noisy-benchmark recalls used by the acceptance suite.

Run from the repository root: ``python tests/fixtures/regen_desk_fixture.py``.
"""

import json
from pathlib import Path

from axn.evalharness import ExperimentSpec, run_experiment

HERE = Path(__file__).parent

EXPERIMENT = {
    "benchmark": {"sigma": 0.5},
    "index": {"kind": "trns", "k_d": 100},
    "methods": [
        {"name": "axn", "kind": "axn", "init": "emb", "rounds": 5, "lam": 0.0},
        {"name": "rnr", "kind": "rnr"},
    ],
    "budgets": [100, 500],
    "k_values": [1, 100],
    "seeds": [0, 1, 2],
}


def measure() -> dict:
    report = run_experiment(ExperimentSpec.from_dict(EXPERIMENT))
    cells = [("axn", 1, 100), ("rnr", 1, 100), ("axn", 100, 500), ("rnr", 100, 500)]
    return {f"{m}/top{k}@{b}": report.get(m, k, b).recall_mean for m, k, b in cells}


if __name__ == "__main__":
    doc = {"experiment": EXPERIMENT, "recall": measure()}
    (HERE / "desk_sigma05.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(json.dumps(doc["recall"], indent=1))
