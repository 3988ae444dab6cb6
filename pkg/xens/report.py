"""
Cross-validated summary tables: per-model metrics as "mean±std" and the pairwise
t-test table against the baseline A and the full ensemble E_abc.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import MAIN_MODELS
from .errors import DataError
from .evaluation import FoldAggregate
from .stats import TTestResult, pooled_t_test
from .utils import Table, format_mean_std, write_table

log = logging.getLogger(__name__)

BASELINE_ID = "A"
FULL_ENSEMBLE_ID = "E_abc"
STD_NOTE = "± is the sample standard deviation (n-1) over folds"
PPV_NOTE = ("PPV is the fold-averaged probability of the true class per test image; "
            "± is its sample standard deviation over images")

SUMMARY_FILE = "summary.tsv"
TTEST_FILE = "ttest.tsv"
TEXT_FILE = "report.txt"
COMPARISON_FILE = "comparison.tsv"
COMPARISON_TEXT_FILE = "comparison.txt"


@dataclass
class ReportDocument:
    metrics: Table
    ttests: Table
    comparisons: dict[tuple[str, str], TTestResult]

    def text(self) -> str:
        parts = [_aligned(self.metrics, "Cross-validated performance"),
                 _aligned(self.ttests, "Pairwise t-tests on PPV")]
        return "\n".join(parts)


def metric_columns(class_names: Sequence[str]) -> list[str]:
    cols = [f"{name}.{metric}" for name in class_names for metric in ("precision", "recall", "f1")]
    return cols + ["accuracy", "mcc"]


def _fmt_t(result: Optional[TTestResult]) -> tuple[str, str]:
    if result is None:
        return "-", "-"
    return f"{result.t:.3f}", f"{result.p:.5f}"


def render_report(aggregates: Mapping[str, FoldAggregate], ppvs: Mapping[str, np.ndarray],
                  models: Sequence[str] = MAIN_MODELS,
                  meta: Sequence[tuple[str, str]] = ()) -> ReportDocument:
    """
    Build the metrics table (one row per model) and the t-test table.

    Args:
        aggregates: model id -> fold aggregate on the shared test manifest
        ppvs: model id -> per-image PPV on the test manifest (same image order for all)
        models: Row order
        meta: Provenance pairs written into both tables

    Raises:
        DataError: a model is missing, or the models disagree on classes or test images
    """
    missing = [m for m in models if m not in aggregates]
    if missing:
        raise DataError(f"missing report(s) for model(s): {', '.join(missing)}")
    missing = [m for m in models if m not in ppvs]
    if missing:
        raise DataError(f"missing PPV vector(s) for model(s): {', '.join(missing)}")

    class_names = aggregates[models[0]].class_names
    odd = [m for m in models if aggregates[m].class_names != class_names]
    if odd:
        raise DataError(f"model(s) {', '.join(odd)} use classes other than {', '.join(class_names)}")
    sizes = {m: len(ppvs[m]) for m in models}
    if len(set(sizes.values())) != 1:
        raise DataError(f"models were scored on different test sets: {sizes}")

    columns = metric_columns(class_names)
    rows = []
    for m in models:
        agg = aggregates[m]
        rows.append([m] + [format_mean_std(*agg.metrics[c]) for c in columns])
    n_folds = aggregates[models[0]].n_folds
    metrics = Table(["model"] + columns, rows,
                    list(meta) + [("folds", str(n_folds)), ("note", STD_NOTE)])

    # column A: candidate = row model vs baseline A; column E_abc: candidate = E_abc vs row model
    comparisons: dict[tuple[str, str], TTestResult] = {}
    t_rows = []
    for m in models:
        vs_a = None
        if BASELINE_ID in ppvs and m != BASELINE_ID:
            vs_a = pooled_t_test(ppvs[m], ppvs[BASELINE_ID])
            comparisons[(m, BASELINE_ID)] = vs_a
        vs_e = None
        if FULL_ENSEMBLE_ID in ppvs and m != FULL_ENSEMBLE_ID:
            vs_e = pooled_t_test(ppvs[FULL_ENSEMBLE_ID], ppvs[m])
            comparisons[(FULL_ENSEMBLE_ID, m)] = vs_e
        ppv = np.asarray(ppvs[m], dtype=np.float64)
        t_rows.append([m, format_mean_std(float(ppv.mean()), float(ppv.std(ddof=1))),
                       *_fmt_t(vs_a), *_fmt_t(vs_e)])
    ttests = Table(
        ["model", "ppv", f"t_vs_{BASELINE_ID}", f"p_vs_{BASELINE_ID}",
         f"t_vs_{FULL_ENSEMBLE_ID}", f"p_vs_{FULL_ENSEMBLE_ID}"],
        t_rows,
        list(meta) + [
            ("n_images", str(len(ppvs[models[0]]))),
            ("orientation", f"vs_{BASELINE_ID}: row model minus {BASELINE_ID}; "
                            f"vs_{FULL_ENSEMBLE_ID}: {FULL_ENSEMBLE_ID} minus row model"),
            ("p", "one-sided upper tail of Student's t"),
            ("note", PPV_NOTE),
        ],
    )
    return ReportDocument(metrics, ttests, comparisons)


def _aligned(table: Table, title: str) -> str:
    """Plain-text rendering with space-padded columns."""
    grid = [table.header] + table.rows
    widths = [max(len(row[i]) for row in grid) for i in range(len(table.header))]
    lines = [title, "=" * len(title)]
    lines += [f"{k}: {v}" for k, v in table.meta]
    for i, row in enumerate(grid):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report_files(document: ReportDocument, out_dir: Path) -> list[Path]:
    """Write summary.tsv, ttest.tsv and report.txt; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / SUMMARY_FILE, out_dir / TTEST_FILE, out_dir / TEXT_FILE]
    write_table(paths[0], document.metrics)
    write_table(paths[1], document.ttests)
    paths[2].write_bytes(document.text().encode("utf-8"))
    log.info("[Report] wrote %s", ", ".join(p.name for p in paths))
    return paths


def comparison_metrics(class_names: Sequence[str]) -> list[str]:
    return ["accuracy", "mcc"] + [f"{name}.{metric}" for name in class_names for metric in ("recall", "f1")]


def render_comparison(raw: Mapping[str, FoldAggregate], refined: Mapping[str, FoldAggregate],
                      models: Sequence[str] = MAIN_MODELS,
                      meta: Sequence[tuple[str, str]] = ()) -> Table:
    """
    Side-by-side raw vs refined table: one row per (model, metric) with both
    "mean±std" cells and the change in means (refined minus raw).

    The two runs may hold different test images; only models and classes must agree.
    """
    for name, side in (("raw", raw), ("refined", refined)):
        missing = [m for m in models if m not in side]
        if missing:
            raise DataError(f"{name} run lacks report(s) for model(s): {', '.join(missing)}")
    class_names = raw[models[0]].class_names
    odd = [f"{name}:{m}" for name, side in (("raw", raw), ("refined", refined))
           for m in models if side[m].class_names != class_names]
    if odd:
        raise DataError(f"{', '.join(odd)} use classes other than {', '.join(class_names)}")

    rows = []
    for m in models:
        for metric in comparison_metrics(class_names):
            before, after = raw[m].metrics[metric], refined[m].metrics[metric]
            rows.append([m, metric, format_mean_std(*before), format_mean_std(*after),
                         f"{after[0] - before[0]:+.3f}"])
    return Table(["model", "metric", "raw", "refined", "change"], rows,
                 list(meta) + [("folds_raw", str(raw[models[0]].n_folds)),
                               ("folds_refined", str(refined[models[0]].n_folds)),
                               ("change", "refined mean minus raw mean"), ("note", STD_NOTE)])


def write_comparison_files(table: Table, out_dir: Path) -> list[Path]:
    """Write comparison.tsv and comparison.txt; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / COMPARISON_FILE, out_dir / COMPARISON_TEXT_FILE]
    write_table(paths[0], table)
    paths[1].write_bytes(_aligned(table, "Raw vs refined dataset").encode("utf-8"))
    log.info("[Report] wrote %s", ", ".join(p.name for p in paths))
    return paths
