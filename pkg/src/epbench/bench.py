"""Experiment harness: evaluation, run records, metric aggregation, and the
CSV/JSON result files every CLI command writes.

A RunRecord is one (model, attack-or-corruption, strength) accuracy cell;
mean robustness is the unweighted mean over all non-clean cells. The CSV
column order is fixed and the JSON mirror carries the same fields, so every
printed number can be regenerated from the emitted files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

CSV_COLUMNS = ("model", "attack", "norm", "strength", "severity", "accuracy",
               "n", "seed", "wall_ms")


@dataclass
class RunRecord:
    model: str
    attack: str            # attack family, corruption kind, or "clean"
    norm: str = ""
    strength: float = 0.0  # epsilon, C&W constant, or 0 for clean rows
    severity: int = 0      # corruption severity; 0 otherwise
    accuracy: float = 0.0
    n: int = 0
    seed: int = 0
    wall_ms: float = 0.0


def evaluate(model_eval, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of model_eval(images)->labels over the dataset."""
    ys = dataset.labels
    if len(ys) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = 0
    for b0 in range(0, len(ys), batch_size):
        xs = np.asarray(dataset.images[b0:b0 + batch_size], dtype=np.float64)
        hits += int(np.sum(np.asarray(model_eval(xs)) == ys[b0:b0 + batch_size]))
    return hits / len(ys)


def mean_robustness(records: list[RunRecord]) -> float:
    """Unweighted mean accuracy over all (attack, strength) cells, clean excluded."""
    cells = [r.accuracy for r in records if r.attack != "clean"]
    if not cells:
        raise ValueError("mean_robustness needs at least one non-clean record")
    return float(np.mean(cells))


def emit_results(records: list[RunRecord], path, fmt: str = "csv") -> None:
    """Write records as CSV (fixed column order) or a JSON mirror."""
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for r in records:
                writer.writerow(asdict(r))
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump([asdict(r) for r in records], fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown result format {fmt!r}")


def read_results(path) -> list[RunRecord]:
    """Parse a result file written by emit_results (csv by suffix, else json)."""
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            rows = json.load(fh)
    else:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    records = []
    for row in rows:
        records.append(RunRecord(
            model=row["model"], attack=row["attack"], norm=row["norm"],
            strength=float(row["strength"]), severity=int(row["severity"]),
            accuracy=float(row["accuracy"]), n=int(row["n"]),
            seed=int(row["seed"]), wall_ms=float(row["wall_ms"]),
        ))
    return records
