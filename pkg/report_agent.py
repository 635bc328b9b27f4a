# report_agent.py
"""
Comparison report over finished runs.

Reads metrics.json documents (plus the sibling timing.json when present),
groups them per controller and reports single-solve and whole-run solve
times with the percentage against a baseline controller, next to the error
metrics. Rendered as JSON and as an aligned text table.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from logs import log

DEFAULT_BASELINE = "triggered"

TIMING_COLUMNS = ("solve_mean_s", "solve_max_s", "solve_total_s", "percentage")
ERROR_COLUMNS = ("final_position_error", "rms_tracking_error", "cumulative_cost",
                 "max_constraint_violation", "tube_containment_rate")


class CompareError(ValueError):
    pass


class ControllerRow(BaseModel):
    controller: str
    runs: int
    solve_mean_s: float
    solve_max_s: float
    solve_total_s: float
    # mean single-solve time relative to the baseline, in percent
    percentage: Optional[float] = None
    final_position_error: float
    rms_tracking_error: float
    cumulative_cost: float
    max_constraint_violation: float
    tube_containment_rate: float


class ComparisonReport(BaseModel):
    task: str
    baseline: str
    rows: List[ControllerRow] = Field(default_factory=list)

    def row(self, controller: str) -> ControllerRow:
        for r in self.rows:
            if r.controller == controller:
                return r
        raise KeyError(controller)


# ======= Loading =======

def load_run_document(path: Union[str, Path]) -> Dict[str, Any]:
    """A metrics.json file, or a run directory holding one. Merges timing.json."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    timing = path.with_name("timing.json")
    if timing.is_file() and "solve_time_stats" not in doc:
        doc["solve_time_stats"] = json.loads(timing.read_text(encoding="utf-8")).get("solve_time_stats", {})
    return doc


def load_run_documents(paths: Sequence[Union[str, Path]]) -> List[Dict[str, Any]]:
    return [load_run_document(p) for p in paths]


# ======= Comparison =======

def _frame(docs: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    records = []
    for i, doc in enumerate(docs):
        if "controller" not in doc or "metrics" not in doc:
            raise CompareError(f"document {i} is not a metrics document")
        stats = doc.get("solve_time_stats") or {}
        rec = {"controller": doc["controller"], "task": doc.get("task", ""),
               "solve_mean_s": float(stats.get("mean", 0.0)),
               "solve_max_s": float(stats.get("max", 0.0)),
               "solve_total_s": float(stats.get("total", 0.0))}
        for col in ERROR_COLUMNS:
            rec[col] = float(doc["metrics"].get(col, np.nan))
        records.append(rec)
    return pd.DataFrame.from_records(records)


def compare_documents(docs: Sequence[Dict[str, Any]], baseline: Optional[str] = None) -> ComparisonReport:
    if len(docs) < 2:
        raise CompareError("at least two metrics documents are required")
    df = _frame(docs)
    tasks = sorted(df["task"].unique())
    if len(tasks) != 1:
        raise CompareError(f"documents mix tasks {tasks}")

    grouped = df.groupby("controller", sort=False)
    agg = grouped.agg(
        runs=("solve_mean_s", "size"),
        solve_mean_s=("solve_mean_s", "mean"),
        solve_max_s=("solve_max_s", "max"),
        solve_total_s=("solve_total_s", "mean"),
        **{c: (c, "max" if c == "max_constraint_violation" else "mean") for c in ERROR_COLUMNS},
    )

    names = list(agg.index)
    if baseline is None:
        baseline = DEFAULT_BASELINE if DEFAULT_BASELINE in names else names[0]
    elif baseline not in names:
        raise CompareError(f"baseline '{baseline}' not among controllers {names}")
    base_mean = float(agg.loc[baseline, "solve_mean_s"])
    agg["percentage"] = 100.0 * agg["solve_mean_s"] / base_mean if base_mean > 0 else np.nan

    rows = []
    for name, r in agg.iterrows():
        pct = float(r["percentage"])
        rows.append(ControllerRow(controller=str(name), runs=int(r["runs"]),
                                  percentage=None if np.isnan(pct) else pct,
                                  **{c: float(r[c]) for c in TIMING_COLUMNS[:3] + ERROR_COLUMNS}))
    report = ComparisonReport(task=tasks[0], baseline=baseline, rows=rows)
    log("info", "compare_done", task=report.task, baseline=baseline, controllers=names)
    return report


def compare_files(paths: Sequence[Union[str, Path]], baseline: Optional[str] = None) -> ComparisonReport:
    return compare_documents(load_run_documents(paths), baseline=baseline)


# ======= Rendering =======

def render_table(report: ComparisonReport) -> str:
    df = pd.DataFrame([r.model_dump() for r in report.rows]).set_index("controller")
    df["percentage"] = df["percentage"].map(lambda v: "n/a" if v is None or pd.isna(v) else f"{v:.1f}%")
    head = f"task: {report.task}  baseline: {report.baseline}"
    timing = df[["runs", *TIMING_COLUMNS]].to_string(float_format=lambda v: f"{v:.6f}")
    errors = df[list(ERROR_COLUMNS)].to_string(float_format=lambda v: f"{v:.6g}")
    return "\n\n".join([head, timing, errors]) + "\n"


def render_json(report: ComparisonReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True)
