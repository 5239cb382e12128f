"""Restart sweeps, degenerate-run accounting, comparison grids, and the
per-run score export used for strip plots."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import metrics as M
from .datakit import Vocab
from .encoder import EncoderConfig
from .pipeline import PhaseResult, RegimePlan, RunRecord, prepare_shared, run_regime

DEFAULT_EPSILON = 2.0
THREADS_ENV = "STILTS_LAB_THREADS"


def degenerate_count(scores: Sequence[float], chance: float, epsilon: float = DEFAULT_EPSILON) -> int:
    """Number of scores within ``epsilon`` points of ``chance``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return int(sum(abs(s - chance) <= epsilon for s in scores))


@dataclass
class SweepSummary:
    label: str
    regime: str
    intermediate: Optional[str]
    target: str
    train_cap: Optional[int]
    records: List[RunRecord]
    chance: float
    epsilon: float = DEFAULT_EPSILON

    @property
    def scores(self) -> List[float]:
        return [r.primary for r in self.records]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        # population std: the run set is the whole population being summarised
        return float(np.std(self.scores))

    @property
    def min(self) -> float:
        return float(np.min(self.scores))

    @property
    def max(self) -> float:
        return float(np.max(self.scores))

    @property
    def best(self) -> RunRecord:
        # first maximum in seed order
        return max(self.records, key=lambda r: r.primary)

    @property
    def best_seed(self) -> int:
        return self.best.seed

    @property
    def degenerate(self) -> int:
        return sum(1 for r in self.records if r.aborted) + degenerate_count(
            [r.primary for r in self.records if not r.aborted], self.chance, self.epsilon)


def worker_count(requested: int = 1) -> int:
    cap = os.environ.get(THREADS_ENV)
    n = max(1, int(requested))
    if cap:
        n = min(n, max(1, int(cap)))
    return n


_CONTEXT: dict = {}


def _init_worker(pretrained, config, vocab, epsilon, cache):
    _CONTEXT.update(pretrained=pretrained, config=config, vocab=vocab, epsilon=epsilon, cache=cache)


def _run_one(args):
    plan, seed = args
    c = _CONTEXT
    return run_regime(plan, c["pretrained"], c["config"], c["vocab"], seed, c["epsilon"], c["cache"])


def run_restarts(plan: RegimePlan, n: int, seed_base: int, *, pretrained: Mapping[str, np.ndarray],
                 config: EncoderConfig, vocab: Vocab, epsilon: float = DEFAULT_EPSILON,
                 workers: int = 1, seeds: Optional[Sequence[int]] = None,
                 on_record: Optional[Callable[[RunRecord], None]] = None,
                 cache: Optional[Dict[str, PhaseResult]] = None) -> SweepSummary:
    """Run ``plan`` under seeds ``seed_base .. seed_base + n - 1``.

    Each run is a pure function of its seed, so the summary is the same
    whatever the worker count or execution order.  A fixed-seed
    intermediate phase is trained once, before any restart, and kept in
    ``cache``.
    """
    if seeds is None:
        if n < 1:
            raise ValueError("run_restarts: n must be >= 1")
        seeds = range(seed_base, seed_base + n)
    seeds = list(seeds)
    jobs = [(plan, s) for s in seeds]
    w = worker_count(workers)
    cache = {} if cache is None else cache
    prepare_shared(plan, pretrained, config, vocab, cache)
    if w == 1:
        _init_worker(pretrained, config, vocab, epsilon, cache)
        records = []
        for job in jobs:
            rec = _run_one(job)
            records.append(rec)
            if on_record:
                on_record(rec)
    else:
        with ProcessPoolExecutor(w, initializer=_init_worker,
                                 initargs=(pretrained, config, vocab, epsilon, cache)) as pool:
            records = []
            for rec in pool.map(_run_one, jobs):
                records.append(rec)
                if on_record:
                    on_record(rec)
    records.sort(key=lambda r: r.seed)
    return summarize(plan.label, records, plan.target.task.chance_score, epsilon,
                     regime=plan.regime, intermediate=plan.intermediate.task.name if plan.intermediate else None,
                     target=plan.target.task.name, train_cap=plan.train_cap)


def summarize(label: str, records: Sequence[RunRecord], chance: float, epsilon: float = DEFAULT_EPSILON,
              **fields) -> SweepSummary:
    records = sorted(records, key=lambda r: r.seed)
    first = records[0]
    info = dict(regime=first.regime, intermediate=first.intermediate, target=first.target,
                train_cap=first.train_cap)
    info.update(fields)
    return SweepSummary(label=label, records=list(records), chance=chance, epsilon=epsilon, **info)


# comparison grids


@dataclass
class GridReport:
    tasks: List[str]
    rows: List[M.ScoreRow]
    sweeps: Dict[Tuple[str, str], SweepSummary] = field(default_factory=dict)

    def render(self) -> str:
        return M.render_table(self.rows, self.tasks, aggregate=len(self.tasks) > 1, exclude=())

    def to_csv(self) -> str:
        return M.rows_to_csv(self.rows)


RowKey = Tuple[str, Optional[str]]


def row_key(plan: RegimePlan) -> RowKey:
    return plan.regime, plan.intermediate.task.name if plan.intermediate else None


def row_label(key: RowKey) -> str:
    regime, inter = key
    return {
        "baseline": "baseline",
        "stilts": f"->{inter}",
        "multitask": f"{{{inter}, target}}",
        "multitask_then_target": f"{{{inter}, target}}->target",
    }[regime]


def comparison_grid(plans: Sequence[RegimePlan], n: int, seed_base: int = 0, *,
                    pretrained, config: EncoderConfig, vocab: Vocab,
                    epsilon: float = DEFAULT_EPSILON, workers: int = 1,
                    on_record: Optional[Callable[[RunRecord], None]] = None,
                    sweeps: Optional[Mapping[Tuple[str, str], SweepSummary]] = None,
                    cache: Optional[Dict[str, PhaseResult]] = None,
                    extra_rows: Sequence[RowKey] = ()) -> GridReport:
    """Rows are (regime, intermediate) pairs, columns are target tasks; each
    cell holds the metrics of the best-on-dev restart.

    A row whose intermediate task is a column's target has no plan for that
    cell (the pairing is rejected); it gets the baseline cell instead,
    flagged as substituted.  ``extra_rows`` adds such rows when no plan
    mentions them at all.  A Best of Each row is appended.  Precomputed
    ``sweeps`` keyed by (row label, target) are used as-is.
    """
    tasks: List[str] = []
    keys: List[RowKey] = []
    by_cell: Dict[Tuple[RowKey, str], RegimePlan] = {}
    for plan in plans:
        key, tname = row_key(plan), plan.target.task.name
        if tname not in tasks:
            tasks.append(tname)
        if key not in keys:
            keys.append(key)
        by_cell[key, tname] = plan
    keys += [k for k in extra_rows if k not in keys]

    done: Dict[Tuple[str, str], SweepSummary] = dict(sweeps or {})
    scores: Dict[Tuple[RowKey, str], List[float]] = {}
    for (key, tname), plan in by_cell.items():
        label = row_label(key)
        if (label, tname) not in done:
            done[label, tname] = run_restarts(plan, n, seed_base, pretrained=pretrained, config=config,
                                              vocab=vocab, epsilon=epsilon, workers=workers,
                                              on_record=on_record, cache=cache)
        best = done[label, tname].best
        scores[key, tname] = [best.scores[m] for m in plan.target.task.metrics]

    base_key = ("baseline", None)
    baseline = M.ScoreRow("baseline", {t: scores[base_key, t] for t in tasks if (base_key, t) in scores})
    rows = []
    for key in keys:
        grid = [M.GridCell(key[1], t, scores.get((key, t), [])) for t in tasks]
        grid = M.same_task_substitution(grid, baseline)
        row = M.ScoreRow(row_label(key), {c.target: c.scores for c in grid if c.scores})
        row.substituted = {c.target for c in grid if c.substituted}
        rows.append(row)
    complete = [r for r in rows if all(t in r.scores for t in tasks)]
    if complete:
        rows.append(M.best_of_each(complete))
    return GridReport(tasks, rows, done)


# plot data


STABILITY_COLUMNS = ["kind", "task", "regime", "intermediate", "cap", "seed", "score", "mean", "std"]


def stability_export(sweeps: Sequence[SweepSummary]) -> str:
    """CSV with one ``run`` row per restart and one ``summary`` row
    (mean, population std) per sweep."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STABILITY_COLUMNS)

    def cap(s):
        return "" if s.train_cap is None else s.train_cap

    for s in sweeps:
        for r in s.records:
            w.writerow(["run", s.target, s.regime, s.intermediate or "", cap(s), r.seed, repr(r.primary), "", ""])
    for s in sweeps:
        w.writerow(["summary", s.target, s.regime, s.intermediate or "", cap(s), "", "", repr(s.mean), repr(s.std)])
    return buf.getvalue()


def read_stability(text: str) -> List[dict]:
    return list(csv.DictReader(io.StringIO(text)))
