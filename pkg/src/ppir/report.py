"""Metrics rows, CSV and markdown reports.

Raw per-repeat results are stored as JSON; reports are pure functions of
that file, so regenerating them from stored results is byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

MB = float(1 << 20)


@dataclass
class RunRecord:
    """One repeat of one benchmark cell, before aggregation."""

    label: str
    backend: str
    sampling: str
    intensity_error: float | None = None
    iterations: int = 0
    rmse_truth: float | None = None
    rmse_clear: float | None = None
    time_party1: float = 0.0  # seconds per iteration
    time_party2: float = 0.0
    comm_party1: float = 0.0  # bytes per iteration
    comm_party2: float = 0.0
    he_rotations: int = 0
    he_multiplications: int = 0
    cost: str = "ssd"
    final_cost: float | None = None
    error: str | None = None
    theta: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.error is None


def _stats(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    # population sd over repeats, 0 for a single repeat
    return float(arr.mean()), float(arr.std())


@dataclass(frozen=True)
class MetricsRow:
    solution: str
    repeats: int
    failures: int
    intensity_error: tuple
    iterations: tuple
    rmse_clear: tuple
    rmse_truth: tuple
    time_party1: float
    time_party2: float
    comm_party1_mb: float
    comm_party2_mb: float
    he_rotations: float
    he_multiplications: float

    @classmethod
    def aggregate(cls, label: str, runs: list[RunRecord]) -> "MetricsRow":
        if not runs:
            raise ValueError(f"no runs for {label!r}")
        good = [r for r in runs if r.ok]
        clear = all(r.backend == "clear" for r in runs)

        def mean(attr):
            vals = [getattr(r, attr) for r in good]
            return float(np.mean(vals)) if vals else 0.0

        return cls(
            solution=label,
            repeats=len(runs),
            failures=len(runs) - len(good),
            intensity_error=_stats([r.intensity_error for r in good]),
            iterations=_stats([r.iterations for r in good]),
            rmse_clear=(None, None) if clear else _stats([r.rmse_clear for r in good]),
            rmse_truth=_stats([r.rmse_truth for r in good]),
            time_party1=mean("time_party1"),
            time_party2=mean("time_party2"),
            comm_party1_mb=0.0 if clear else mean("comm_party1") / MB,
            comm_party2_mb=0.0 if clear else mean("comm_party2") / MB,
            he_rotations=mean("he_rotations"),
            he_multiplications=mean("he_multiplications"),
        )


CSV_COLUMNS = (
    "solution", "repeats", "failures",
    "intensity_error_mean", "intensity_error_sd",
    "iterations_mean", "iterations_sd",
    "rmse_vs_clear_vox_mean", "rmse_vs_clear_vox_sd",
    "rmse_vs_truth_vox_mean", "rmse_vs_truth_vox_sd",
    "time_party1_s_per_iter", "time_party2_s_per_iter",
    "comm_party1_MB_per_iter", "comm_party2_MB_per_iter",
    "he_rotations", "he_multiplications",
)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if not math.isfinite(v):
        return ""
    return repr(float(v))


def row_values(row: MetricsRow) -> list[str]:
    vals = [row.solution, row.repeats, row.failures, *row.intensity_error, *row.iterations,
            *row.rmse_clear, *row.rmse_truth, row.time_party1, row.time_party2,
            row.comm_party1_mb, row.comm_party2_mb, row.he_rotations, row.he_multiplications]
    return [v if isinstance(v, str) else _cell(v) for v in vals]


def to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow(row_values(row))
    return buf.getvalue()


def _pm(pair, digits=4) -> str:
    m, s = pair
    if m is None:
        return "-"
    return f"{m:.{digits}f} ± {s:.{digits}f}"


def to_markdown(rows: list[MetricsRow], title: str = "Registration metrics") -> str:
    head = ["Solution", "Intensity error", "Iterations", "RMSE vs clear (vox)", "RMSE vs truth (vox)",
            "Time p1 (s/it)", "Time p2 (s/it)", "Comm p1 (MB/it)", "Comm p2 (MB/it)",
            "HE rot.", "HE mult."]
    lines = [f"# {title}", "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r.solution + (f" ({r.failures} failed)" if r.failures else ""),
                 _pm(r.intensity_error), _pm(r.iterations, 1), _pm(r.rmse_clear), _pm(r.rmse_truth),
                 f"{r.time_party1:.4f}", f"{r.time_party2:.4f}",
                 f"{r.comm_party1_mb:.4f}", f"{r.comm_party2_mb:.4f}",
                 f"{r.he_rotations:.0f}", f"{r.he_multiplications:.0f}"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Raw results

def save_raw(runs: list[RunRecord], path) -> Path:
    path = Path(path)
    payload = {"runs": [asdict(r) for r in runs]}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def load_raw(path) -> list[RunRecord]:
    names = {f.name for f in fields(RunRecord)}
    data = json.loads(Path(path).read_text())
    return [RunRecord(**{k: v for k, v in r.items() if k in names}) for r in data["runs"]]


def rows_from_runs(runs: list[RunRecord]) -> list[MetricsRow]:
    """One row per label, in first-seen order."""
    order, groups = [], {}
    for r in runs:
        if r.label not in groups:
            order.append(r.label)
            groups[r.label] = []
        groups[r.label].append(r)
    return [MetricsRow.aggregate(label, groups[label]) for label in order]


def write_reports(runs: list[RunRecord], out, title: str = "Registration metrics") -> tuple[Path, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = rows_from_runs(runs)
    csv_path, md_path = out / "metrics.csv", out / "report.md"
    csv_path.write_text(to_csv(rows))
    md_path.write_text(to_markdown(rows, title))
    return csv_path, md_path
