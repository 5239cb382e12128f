"""Task metrics and GLUE-style score aggregation.

Percentage metrics (accuracy, F1) are returned on a 0-100 scale and
correlations (Matthews, Pearson, Spearman) are reported x100 as well, so
every number lines up with the usual GLUE tables.  Nothing is rounded
here; rounding happens only when a table is rendered.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

# GLUE roster in table order, with the metric pair each task reports
GLUE_TASKS = ("CoLA", "SST", "MRPC", "QQP", "STS", "MNLI", "QNLI", "RTE", "WNLI")
GLUE_EXCLUDE = frozenset({"MNLI", "QQP"})


class MetricError(ValueError):
    pass


def _pair(preds, golds, name):
    p = np.asarray(preds)
    g = np.asarray(golds)
    if p.shape != g.shape or p.ndim != 1:
        raise MetricError(f"{name}: preds and golds must be 1-D and equal length, got {p.shape} and {g.shape}")
    return p, g


def accuracy(preds, golds) -> float:
    p, g = _pair(preds, golds, "accuracy")
    if p.size == 0:
        raise MetricError("accuracy: empty input")
    return 100.0 * float(np.mean(p == g))


def confusion(preds, golds, positive=1) -> Tuple[int, int, int, int]:
    """(TP, FP, FN, TN) for a binary problem."""
    p, g = _pair(preds, golds, "confusion")
    pp, gp = p == positive, g == positive
    return (int(np.sum(pp & gp)), int(np.sum(pp & ~gp)),
            int(np.sum(~pp & gp)), int(np.sum(~pp & ~gp)))


def f1_binary(preds, golds, positive=1) -> float:
    tp, fp, fn, _ = confusion(preds, golds, positive)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def matthews(preds, golds, positive=1) -> float:
    tp, fp, fn, tn = confusion(preds, golds, positive)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return 100.0 * (tp * tn - fp * fn) / math.sqrt(denom)


def _check_corr_input(x, y, name):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"{name}: inputs must be 1-D and equal length")
    if x.size < 2:
        raise MetricError(f"{name}: need at least two points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise MetricError(f"{name}: correlation undefined for constant input")
    return x, y


def pearson(x, y) -> float:
    x, y = _check_corr_input(x, y, "pearson")
    xc, yc = x - x.mean(), y - y.mean()
    r = float(xc @ yc / math.sqrt((xc @ xc) * (yc @ yc)))
    return 100.0 * max(-1.0, min(1.0, r))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x, y = _check_corr_input(x, y, "spearman")
    return pearson(average_ranks(x), average_ranks(y))


METRICS = {
    "accuracy": accuracy,
    "f1": f1_binary,
    "matthews": matthews,
    "pearson": pearson,
    "spearman": spearman,
}


def compute(metric: str, preds, golds) -> float:
    try:
        fn = METRICS[metric]
    except KeyError:
        raise MetricError(f"unknown metric {metric!r}") from None
    return fn(preds, golds)


def majority_label(golds):
    """Most frequent label; ties go to the smallest label."""
    counts = Counter(np.asarray(golds).tolist())
    if not counts:
        raise MetricError("majority_baseline: no labels")
    top = max(counts.values())
    return min(k for k, c in counts.items() if c == top)


def majority_baseline(task, golds) -> List[float]:
    """Scores of predicting the most frequent label for every example,
    one value per metric of ``task``."""
    if task.label_kind != "classification":
        raise MetricError(f"majority_baseline: {task.name} is not a classification task")
    golds = np.asarray(golds)
    preds = np.full_like(golds, majority_label(golds))
    return [compute(m, preds, golds) for m in task.metrics]


# aggregation


@dataclass
class ScoreRow:
    label: str
    scores: Dict[str, List[float]]
    substituted: set = field(default_factory=set)
    sources: Dict[str, str] = field(default_factory=dict)  # task -> winning row, for Best of Each

    def task_score(self, task: str) -> float:
        vals = self.scores[task]
        return float(sum(vals) / len(vals))


def glue_aggregate(row: ScoreRow, tasks: Optional[Sequence[str]] = None,
                   exclude: Iterable[str] = GLUE_EXCLUDE,
                   first_metric_only_ex: bool = False) -> Tuple[float, float]:
    """(Avg, A.Ex) of a row.

    Dual-metric tasks are averaged first, then tasks are averaged without
    weights.  With ``first_metric_only_ex`` the A.Ex column uses only the
    first metric of each dual-metric task.
    """
    tasks = list(row.scores) if tasks is None else list(tasks)
    missing = [t for t in tasks if t not in row.scores]
    if missing:
        raise KeyError(f"glue_aggregate: row {row.label!r} is missing task {missing[0]}")
    if not tasks:
        raise ValueError("glue_aggregate: empty roster")
    exclude = set(exclude)
    avg = sum(row.task_score(t) for t in tasks) / len(tasks)
    kept = [t for t in tasks if t not in exclude]
    if not kept:
        return avg, float("nan")
    if first_metric_only_ex:
        avg_ex = sum(row.scores[t][0] for t in kept) / len(kept)
    else:
        avg_ex = sum(row.task_score(t) for t in kept) / len(kept)
    return avg, avg_ex


def best_of_each(rows: Sequence[ScoreRow], label: str = "Best of Each") -> ScoreRow:
    """Per task, the full metric list of the row with the best pair-averaged
    score.  Ties keep the earliest row, and an unsubstituted cell wins a tie
    against a substituted one."""
    if not rows:
        raise ValueError("best_of_each: no rows")
    tasks = list(rows[0].scores)
    out: Dict[str, List[float]] = {}
    sources: Dict[str, str] = {}
    for t in tasks:
        best = None
        for r in rows:
            s = r.task_score(t)
            if best is None or s > best[0] or (s == best[0] and t in best[1].substituted and t not in r.substituted):
                best = (s, r)
        out[t] = list(best[1].scores[t])
        sources[t] = best[1].label
    return ScoreRow(label, out, sources=sources)


@dataclass
class GridCell:
    intermediate: Optional[str]
    target: str
    scores: List[float]
    substituted: bool = False


def same_task_substitution(grid: Sequence[GridCell], baseline: ScoreRow) -> List[GridCell]:
    """Replace cells whose intermediate task is the target with the baseline
    cell for that target, flagged as substituted."""
    out = []
    for cell in grid:
        if cell.intermediate is not None and cell.intermediate == cell.target:
            out.append(GridCell(cell.intermediate, cell.target, list(baseline.scores[cell.target]), True))
        else:
            out.append(cell)
    return out


# rendering


def _fmt(x: float) -> str:
    return f"{x:.1f}"


def render_table(rows: Sequence[ScoreRow], tasks: Sequence[str], aggregate: bool = True,
                 exclude: Iterable[str] = GLUE_EXCLUDE) -> str:
    """Aligned text table; substituted cells are wrapped in ``~``."""
    header = ["", *(("Avg", "A.Ex") if aggregate else ()), *tasks]
    body = []
    for r in rows:
        line = [r.label]
        if aggregate:
            avg, avg_ex = glue_aggregate(r, tasks, exclude)
            line += [_fmt(avg), "-" if math.isnan(avg_ex) else _fmt(avg_ex)]
        for t in tasks:
            cell = "/".join(_fmt(v) for v in r.scores[t])
            line.append(f"~{cell}~" if t in r.substituted else cell)
        body.append(line)
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = []
    for row in [header, *body]:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip())
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: Sequence[ScoreRow]) -> str:
    """Long-format CSV (label, task, metric_index, value, substituted) with
    values in full ``repr`` precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "task", "metric_index", "value", "substituted"])
    for r in rows:
        for t, vals in r.scores.items():
            for i, v in enumerate(vals):
                w.writerow([r.label, t, i, repr(float(v)), int(t in r.substituted)])
    return buf.getvalue()


def rows_from_csv(text: str) -> List[ScoreRow]:
    rows: Dict[str, ScoreRow] = {}
    for rec in csv.DictReader(io.StringIO(text)):
        row = rows.setdefault(rec["label"], ScoreRow(rec["label"], {}))
        vals = row.scores.setdefault(rec["task"], [])
        idx = int(rec["metric_index"])
        if idx != len(vals):
            raise ValueError(f"rows_from_csv: metric index {idx} out of order for {rec['label']}/{rec['task']}")
        vals.append(float(rec["value"]))
        if int(rec["substituted"]):
            row.substituted.add(rec["task"])
    return list(rows.values())
