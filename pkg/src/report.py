"""
Campaign reports built from RunLogs.

  deciles.csv   label,t_sec,n_runs,n_top,min,q1,median,q3,max
                boxplot statistics of the best 10% of runs at each checkpoint
  scatter.csv   label,run,wce,area,fitness
                final (wce, area) point of every run
  utest.csv     t_sec,baseline,candidate,n_baseline,n_candidate,U,p_less
                one-sided Mann–Whitney U: is the candidate's fitness lower?
"""

import csv
import glob
import logging
import math
import os

import numpy as np
from scipy.stats import mannwhitneyu

from src.models import RunLog

logger = logging.getLogger(__name__)

DECILE_HEADER = ["label", "t_sec", "n_runs", "n_top", "min", "q1", "median", "q3", "max"]
SCATTER_HEADER = ["label", "run", "wce", "area", "fitness"]
UTEST_HEADER = ["t_sec", "baseline", "candidate", "n_baseline", "n_candidate", "U", "p_less"]

RUNLOG_GLOB = "*.runlog.csv"


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def top_decile(values: list[float]) -> list[float]:
    """The best max(1, ceil(n/10)) values, ascending."""
    ordered = sorted(values)
    return ordered[:max(1, math.ceil(len(ordered) / 10))]


def decile_rows(logs: dict[str, list[RunLog]], checkpoints: list[float]) -> list[list]:
    rows = []
    for label, runs in logs.items():
        for t in checkpoints:
            top = np.array(top_decile([log.fitness_at(t) for log in runs]))
            # no interpolation; top may hold inf
            q1, med, q3 = np.quantile(top, [0.25, 0.5, 0.75], method="inverted_cdf")
            rows.append([label, f"{t:g}", len(runs), top.size] + [_fmt(v) for v in (top[0], q1, med, q3, top[-1])])
    return rows


def scatter_rows(logs: dict[str, list[RunLog]]) -> list[list]:
    rows = []
    for label, runs in logs.items():
        for i, log in enumerate(runs):
            final = log.final
            rows.append([label, i, final.wce, f"{final.area:.4f}", _fmt(final.fitness)])
    return rows


def u_test(baseline: list[float], candidate: list[float]) -> tuple[float, float]:
    """U statistic of the candidate sample and the one-sided p-value for 'candidate < baseline'."""
    if len(set(baseline) | set(candidate)) <= 1:
        return len(baseline) * len(candidate) / 2.0, 1.0
    res = mannwhitneyu(candidate, baseline, alternative="less")
    return float(res.statistic), float(res.pvalue)


def utest_rows(
    logs: dict[str, list[RunLog]],
    checkpoints: list[float],
    baseline: str,
    candidates: list[str] | None = None,
) -> list[list]:
    if baseline not in logs:
        raise KeyError(f"baseline label {baseline!r} has no runs")
    candidates = candidates or [label for label in logs if label != baseline]
    rows = []
    for label in candidates:
        for t in checkpoints:
            a = [log.fitness_at(t) for log in logs[baseline]]
            b = [log.fitness_at(t) for log in logs[label]]
            u, p = u_test(a, b)
            rows.append([f"{t:g}", baseline, label, len(a), len(b), f"{u:.1f}", f"{p:.6g}"])
            logger.info("U-test t=%gs %s < %s: U=%.1f p=%.4g", t, label, baseline, u, p)
    return rows


def _write(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_report(
    logs: dict[str, list[RunLog]],
    checkpoints: list[float],
    out_dir: str,
    baseline: str | None = None,
) -> list[str]:
    """Write the report CSVs; returns the file names written inside out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    written = ["deciles.csv", "scatter.csv"]
    _write(os.path.join(out_dir, "deciles.csv"), DECILE_HEADER, decile_rows(logs, checkpoints))
    _write(os.path.join(out_dir, "scatter.csv"), SCATTER_HEADER, scatter_rows(logs))
    if baseline is not None and len(logs) > 1:
        _write(os.path.join(out_dir, "utest.csv"), UTEST_HEADER, utest_rows(logs, checkpoints, baseline))
        written.append("utest.csv")
    return written


def read_runs(runs_dir: str, label: str | None = None) -> list[RunLog]:
    """All RunLog CSVs under runs_dir, in sorted path order."""
    paths = sorted(glob.glob(os.path.join(runs_dir, "**", RUNLOG_GLOB), recursive=True))
    label = label or os.path.basename(os.path.normpath(runs_dir))
    return [RunLog.read_csv(p, label=label) for p in paths]


def summary_text(logs: dict[str, list[RunLog]], checkpoints: list[float], baseline: str | None = None) -> str:
    """Short plain-text digest, used for the Slack post."""
    lines = ["*Approximate multiplier campaign*"]
    for label, runs in logs.items():
        finals = [log.final.fitness for log in runs]
        finite = [f for f in finals if math.isfinite(f)]
        best = min(finite) if finite else math.inf
        lines.append(f"• {label}: {len(runs)} run(s), best area {_fmt(best)} µm²")
    if baseline is not None and len(logs) > 1:
        for row in utest_rows(logs, checkpoints, baseline):
            lines.append(f"• t={row[0]}s  {row[2]} < {row[1]}: p={row[6]}")
    return "\n".join(lines)
