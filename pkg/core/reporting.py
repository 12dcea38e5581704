# core/reporting.py
"""Summary tables over metrics files: mean ± population std across seeds, grouped by grid coordinates."""
import glob
import logging
import os

import pandas as pd
from tabulate import tabulate

from utils import constants
from utils.metrics_writer import read_metrics
from .errors import ManifestError

logger = logging.getLogger(__name__)


def find_metrics_files(paths) -> list[str]:
    """Metrics files named directly or found (recursively) under the given directories."""
    found = []
    for path in paths:
        if os.path.isdir(path):
            pattern = os.path.join(path, "**", constants.METRICS_FILE_TEMPLATE.format(seed="*"))
            found.extend(sorted(glob.glob(pattern, recursive=True)))
        elif os.path.exists(path):
            found.append(path)
        else:
            raise ManifestError(f"find_metrics_files: no such file or directory: {path}")
    return found


def load_runs(paths) -> pd.DataFrame:
    """One row per finished run: grid coordinates, seed and the run's recall values."""
    rows = []
    for path in find_metrics_files(paths):
        records = read_metrics(path)
        config = next((r for r in records if r.get("type") == constants.RECORD_RUN_CONFIG), None)
        result = next((r for r in records if r.get("type") == constants.RECORD_RUN_RESULT), None)
        if config is None or result is None:
            logger.warning(f"load_runs: {path} has no run_config/run_result pair (run unfinished?); skipped.")
            continue
        row = {"mode": config.get("mode"), **config.get("grid", {}), "seed": result["seed"],
               "best_r1": result.get("best_r1"), "rounds": result.get("rounds")}
        for k, v in result.get("final_recall", {}).items():
            row[f"R@{k}"] = v
        if "1" in result.get("initial_recall", {}):
            row["initial_R@1"] = result["initial_recall"]["1"]
        rows.append(row)
    logger.info(f"load_runs: {len(rows)} finished runs.")
    return pd.DataFrame(rows)


def grid_columns(runs: pd.DataFrame) -> list[str]:
    metric_like = {"seed", "best_r1", "rounds", "initial_R@1"}
    return [c for c in runs.columns if c not in metric_like and not c.startswith("R@")]


def summarize(runs: pd.DataFrame, by: list[str] | None = None) -> pd.DataFrame:
    """Mean and population std (ddof=0) of every recall column, one row per grid point."""
    if runs.empty:
        return pd.DataFrame()
    by = grid_columns(runs) if by is None else by
    metrics = [c for c in runs.columns if c.startswith("R@") or c in ("best_r1", "initial_R@1")]
    grouped = runs.groupby(by, sort=False, dropna=False)[metrics] if by else runs[metrics].groupby(lambda _: 0)
    summary = grouped.agg(["mean", lambda s: s.std(ddof=0)])
    summary.columns = [f"{m}_{'mean' if stat == 'mean' else 'std'}" for m, stat in summary.columns]
    summary["seeds"] = (runs.groupby(by, sort=False, dropna=False).size() if by
                        else pd.Series([len(runs)], index=summary.index))
    return summary.reset_index() if by else summary.reset_index(drop=True)


def format_summary(summary: pd.DataFrame) -> str:
    """Recall columns as percentages 'mean ± std'."""
    if summary.empty:
        return "(no finished runs)"
    out = pd.DataFrame()
    for column in summary.columns:
        if column.endswith("_std"):
            continue
        if column.endswith("_mean"):
            metric = column[:-len("_mean")]
            out[metric] = [f"{100 * m:.1f} ± {100 * s:.1f}" if pd.notna(m) else "-"
                           for m, s in zip(summary[column], summary[f"{metric}_std"])]
        else:
            out[column] = summary[column]
    return tabulate(out, headers="keys", tablefmt="github", showindex=False)


def key_value_table(rows, headers=("statistic", "value")) -> str:
    return tabulate(list(rows), headers=list(headers), tablefmt="github")


def recall_table(recalls: dict) -> str:
    return tabulate([(f"R@{k}", f"{100 * v:.2f}%") for k, v in sorted(recalls.items())],
                    headers=["k", "recall"], tablefmt="github")
