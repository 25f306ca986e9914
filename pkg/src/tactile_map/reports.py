"""Evaluation outputs: per-trial CSV rows and a JSON summary."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .localization import error_histogram

CSV_COLUMNS = ("object", "method", "N", "fraction", "seed", "entry_index", "rmse_mm")
HIST_BIN = 5.0
HIST_RANGE = 80.0


@dataclass(frozen=True)
class TrialSet:
    """Errors of one (object, method, fraction) campaign."""

    object_id: str
    method: str  # RANDOM, CTI or CTI-ICP-<N>
    n: int | None
    fraction: float
    seed: int
    entry_indices: np.ndarray
    errors: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.errors)) if len(self.errors) else float("nan")


def config_line(config: dict) -> str:
    return "# config=" + json.dumps(config, sort_keys=True, separators=(",", ":"))


def trials_to_csv(trials: list[TrialSet], config: dict) -> str:
    buf = io.StringIO()
    buf.write(config_line(config) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for t in trials:
        for i, e in zip(t.entry_indices, t.errors):
            w.writerow([t.object_id, t.method, "" if t.n is None else t.n, f"{t.fraction:g}", t.seed, int(i), f"{e:.6f}"])
    return buf.getvalue()


def read_csv_rows(path) -> tuple[dict, list[dict]]:
    """Parse a results file back into (config, rows)."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# config="):
        raise ValueError("results file lacks the config line")
    config = json.loads(lines[0][len("# config=") :])
    rows = list(csv.DictReader(lines[1:]))
    return config, rows


def summary(trials: list[TrialSet], config: dict) -> dict:
    out = []
    for t in trials:
        out.append(
            {
                "object": t.object_id,
                "method": t.method,
                "N": t.n,
                "fraction": t.fraction,
                "count": int(len(t.errors)),
                "median_mm": round(t.median, 6) if len(t.errors) else None,
                "mean_mm": round(float(np.mean(t.errors)), 6) if len(t.errors) else None,
                "histogram": {
                    "bin_width_mm": HIST_BIN,
                    "range_mm": HIST_RANGE,
                    "counts": error_histogram(t.errors, HIST_BIN, HIST_RANGE).tolist(),
                },
            }
        )
    return {"config": config, "results": out}


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
