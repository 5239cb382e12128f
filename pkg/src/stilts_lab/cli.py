"""Command-line entry point: ``stilts-lab <subcommand> --manifest M [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 runtime
abort.  Every subcommand reads everything it needs from the manifest plus
flags and ``--set dotted.key=value`` overrides; the resolved manifest is
written to ``<out>/manifest.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import datakit as D
from . import harness as H
from . import metrics as M
from . import store
from .autodiff import TrainingAborted
from .experiment import ConfigError, Experiment, semantic_hash
from .pipeline import REGIMES, RunRecord, run_regime

log = logging.getLogger("stilts_lab")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
SUBCOMMANDS = ("gen-fake", "gen-synth", "build-vocab", "pretrain", "run", "sweep", "grid", "report", "check")
SENSITIVITY_EPSILONS = (1.0, 2.0, 5.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; ours is 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _cap(raw: str) -> Optional[int]:
    if raw.lower() in ("none", "full"):
        return None
    value = int(raw)
    if value <= 0:
        raise argparse.ArgumentTypeError("cap must be positive (or 'none')")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--manifest", help="experiment manifest (JSON); required except for check")
    common.add_argument("--restarts", type=int, help="restarts per plan")
    common.add_argument("--cap", type=_cap, help="target training-set cap, or 'none'")
    common.add_argument("--seed", type=int, help="seed (sweeps use seed .. seed+restarts-1)")
    common.add_argument("--workers", type=int, help="parallel runs (capped by STILTS_LAB_THREADS)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a manifest entry, e.g. phases.target.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="stilts-lab", description="Intermediate-task training experiments at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-fake": "write the real/fake sentence datasets as TSV",
        "gen-synth": "write the synthetic pair-task datasets as TSV",
        "build-vocab": "build and save the vocabulary",
        "pretrain": "LM-pretrain the encoder and save a checkpoint",
        "run": "run one plan under one seed",
        "sweep": "run restarts for every plan",
        "grid": "run every plan and render the comparison table",
        "report": "render tables and plot data from stored results",
        "check": "gradient and metric self-tests",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_manifest(args) -> Dict:
    manifest = store.load_manifest(args.manifest)
    manifest = store.apply_overrides(manifest, args.overrides)
    for flag in ("restarts", "seed", "workers", "out"):
        value = getattr(args, flag)
        if value is not None:
            manifest[flag] = value
    if args.cap is not None or "cap" not in manifest:
        manifest["cap"] = args.cap if args.cap is not None else manifest.get("cap")
    if args.overrides:
        manifest["overrides"] = list(manifest.get("overrides", [])) + list(args.overrides)
    return manifest


def open_experiment(args) -> Experiment:
    manifest = resolve_manifest(args)
    exp = Experiment.from_manifest(manifest, root=Path(args.manifest).resolve().parent)
    if args.out is not None:
        exp.out = Path(args.out)
    return exp


def _claim_out(exp: Experiment) -> None:
    """Write the resolved manifest into the output directory, refusing to
    mix results from a different experiment."""
    exp.out.mkdir(parents=True, exist_ok=True)
    path = exp.out / "manifest.json"
    results = exp.out / "results.jsonl"
    if path.exists() and results.exists():
        old = store.load_manifest(path)
        if semantic_hash(old) != exp.hash:
            raise ConfigError(f"{exp.out} already holds results of manifest {semantic_hash(old)}; "
                              f"this is {exp.hash}. Use another --out.")
    store.save_manifest(exp.manifest, path)


def _persist(exp: Experiment, rec: RunRecord) -> None:
    rec.manifest_hash = exp.hash
    data = rec.to_dict()
    wall = data.pop("wall_time")
    # results stay byte-identical across reruns; timings go elsewhere
    store.append_result(data, exp.out / "results.jsonl")
    store.append_result({"target": rec.target, "regime": rec.regime, "intermediate": rec.intermediate,
                         "seed": rec.seed, "wall_time": wall}, exp.out / "timings.jsonl")
    runs = exp.out / "runs"
    runs.mkdir(exist_ok=True)
    (runs / f"{run_stem(rec)}.json").write_text(json.dumps(data, sort_keys=True, indent=1) + "\n",
                                                encoding="utf-8")


def run_stem(rec: RunRecord) -> str:
    """``{target}_{regime}_{cap}_{seed}``; the regime carries its
    intermediate task so that different STILTs chains do not collide."""
    tag = rec.regime if not rec.intermediate else f"{rec.regime}-{rec.intermediate}"
    cap = "full" if rec.train_cap is None else rec.train_cap
    return f"{rec.target}_{tag}_{cap}_{rec.seed}"


def _say(text: str = "") -> None:
    print(text, flush=True)


# subcommands


def cmd_gen_fake(exp: Experiment, args) -> int:
    return _write_generated(exp, "fake")


def cmd_gen_synth(exp: Experiment, args) -> int:
    return _write_generated(exp, "synthetic")


def _write_generated(exp: Experiment, generator: str) -> int:
    names = [n for n, spec in exp.manifest["tasks"].items() if spec.get("generator") == generator]
    if not names:
        raise ConfigError(f"manifest defines no {generator!r} tasks")
    data = exp.out / "data"
    data.mkdir(parents=True, exist_ok=True)
    _claim_out(exp)
    for name in names:
        ds = exp.dataset(name)
        for split in ("train", "dev"):
            path = data / f"{name}_{split}.tsv"
            D.write_tsv(path, getattr(ds, split), ds.task)
            labels = [ex.label for ex in getattr(ds, split)]
            _say(f"{path}: {len(labels)} examples, label 1 share {np.mean(labels) if labels else 0:.3f}")
    return EXIT_OK


def cmd_build_vocab(exp: Experiment, args) -> int:
    _claim_out(exp)
    vocab = exp.vocab()
    path = exp.out / "vocab.txt"
    vocab.save(path)
    _say(f"{path}: {len(vocab)} tokens")
    return EXIT_OK


def cmd_pretrain(exp: Experiment, args) -> int:
    _claim_out(exp)
    losses: List[float] = []
    exp.pretrained(history=losses)
    for i, loss in enumerate(losses):
        _say(f"epoch {i}: LM loss {loss:.4f}")
    _say(f"checkpoint: {exp.out / 'pretrained.ckpt'}")
    return EXIT_OK


def _context(exp: Experiment):
    pretrained = exp.pretrained()
    cache: Dict = {}
    exp.load_intermediates(pretrained, cache)
    return pretrained, exp.encoder_config(), exp.vocab(), cache


def cmd_run(exp: Experiment, args) -> int:
    _claim_out(exp)
    plans = exp.plans()
    index = int(exp.get("plan", 0))
    if not 0 <= index < len(plans):
        raise ConfigError(f"plan index {index} outside 0..{len(plans) - 1}")
    plan = plans[index]
    pretrained, config, vocab, cache = _context(exp)
    rec = run_regime(plan, pretrained, config, vocab, exp.seed, exp.epsilon, cache)
    exp.save_intermediates(pretrained, cache)
    _persist(exp, rec)
    _say(f"{plan.label} seed {rec.seed}: " + ", ".join(f"{k} {v:.2f}" for k, v in sorted(rec.scores.items()))
         + (" (degenerate)" if rec.degenerate else ""))
    return EXIT_ABORT if rec.aborted else EXIT_OK


def _sweep_line(s: H.SweepSummary) -> str:
    return (f"{s.label}: mean {s.mean:.2f} std {s.std:.2f} min {s.min:.2f} max {s.max:.2f} "
            f"best {s.best.primary:.2f} (seed {s.best_seed}) degenerate {s.degenerate}/{len(s.records)}")


def cmd_sweep(exp: Experiment, args) -> int:
    _claim_out(exp)
    pretrained, config, vocab, cache = _context(exp)
    sweeps = []
    for plan in exp.plans():
        s = H.run_restarts(plan, exp.restarts, exp.seed, pretrained=pretrained, config=config, vocab=vocab,
                           epsilon=exp.epsilon, workers=int(exp.get("workers", 1)),
                           on_record=lambda r: _persist(exp, r), cache=cache)
        s.label = plan.label
        sweeps.append(s)
        exp.save_intermediates(pretrained, cache)
        _say(_sweep_line(s))
    (exp.out / "stability.csv").write_text(H.stability_export(sweeps), encoding="utf-8")
    return EXIT_OK


def cmd_grid(exp: Experiment, args) -> int:
    _claim_out(exp)
    pretrained, config, vocab, cache = _context(exp)
    extra = [(r["regime"], r.get("intermediate")) for r in exp.get("grid_rows", [])]
    report = H.comparison_grid(exp.plans(), exp.restarts, exp.seed, pretrained=pretrained, config=config,
                               vocab=vocab, epsilon=exp.epsilon, workers=int(exp.get("workers", 1)),
                               on_record=lambda r: _persist(exp, r), cache=cache, extra_rows=extra)
    exp.save_intermediates(pretrained, cache)
    text = report.render()
    (exp.out / "grid.txt").write_text(text, encoding="utf-8")
    (exp.out / "grid.csv").write_text(report.to_csv(), encoding="utf-8")
    _say(text.rstrip("\n"))
    return EXIT_OK


def render_report(records: Sequence[dict], chances: Dict[str, float]):
    """Per-plan sweep summaries, best-of-restarts table and degenerate
    counts at several thresholds, from stored run records."""
    groups: Dict[tuple, List[RunRecord]] = {}
    for r in records:
        rec = RunRecord.from_dict({**r, "wall_time": 0.0})
        groups.setdefault((rec.target, rec.regime, rec.intermediate or "", rec.train_cap or 0), []).append(rec)
    lines = []
    sweeps = []
    for key in sorted(groups, key=lambda k: (k[0], REGIMES.index(k[1]), k[2], k[3])):
        target, regime, inter, _ = key
        recs = groups[key]
        label = H.row_label((regime, inter or None))
        s = H.summarize(f"{target} {label}", recs, chances.get(target, 50.0))
        sweeps.append(s)
        lines.append(_sweep_line(s))
        lines.append("  degenerate at eps " + ", ".join(
            f"{e:g}: {H.degenerate_count([x.primary for x in recs], s.chance, e)}" for e in SENSITIVITY_EPSILONS))
    return "\n".join(lines) + "\n", sweeps


def report_rows(sweeps, metric_order: Dict[str, Sequence[str]]):
    tasks: List[str] = []
    rows: Dict[str, M.ScoreRow] = {}
    for s in sweeps:
        if s.target not in tasks:
            tasks.append(s.target)
        label = H.row_label((s.regime, s.intermediate or None))
        if s.train_cap:
            label += f" @{s.train_cap}"
        best = s.best
        row = rows.setdefault(label, M.ScoreRow(label, {}))
        row.scores[s.target] = [best.scores[m] for m in metric_order.get(s.target, sorted(best.scores))]
    return tasks, list(rows.values())


def cmd_report(exp: Experiment, args) -> int:
    path = exp.out / "results.jsonl"
    if not path.exists():
        raise ConfigError(f"no results at {path}")
    records = store.read_results(path)
    store.check_single_manifest(records)
    chances, metric_order = {}, {}
    for r in records:
        if r["target"] not in chances and r["target"] in exp.manifest["tasks"]:
            task = exp.dataset(r["target"]).task
            chances[task.name], metric_order[task.name] = task.chance_score, task.metrics
    text, sweeps = render_report(records, chances)
    tasks, rows = report_rows(sweeps, metric_order)
    table = M.render_table(rows, tasks, aggregate=len(tasks) > 1, exclude=())
    out = text + "\n" + table
    (exp.out / "report.txt").write_text(out, encoding="utf-8")
    (exp.out / "report.csv").write_text(M.rows_to_csv(rows), encoding="utf-8")
    (exp.out / "stability.csv").write_text(H.stability_export(sweeps), encoding="utf-8")
    _say(out.rstrip("\n"))
    return EXIT_OK


def cmd_check(exp: Optional[Experiment], args) -> int:
    from .selfcheck import run_checks

    ok, lines = run_checks()
    for line in lines:
        _say(line)
    return EXIT_OK if ok else EXIT_ABORT


COMMANDS = {
    "gen-fake": cmd_gen_fake, "gen-synth": cmd_gen_synth, "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain, "run": cmd_run, "sweep": cmd_sweep, "grid": cmd_grid,
    "report": cmd_report, "check": cmd_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return EXIT_OK if err.code in (0, None) else EXIT_USAGE
    if args.manifest is None and args.command != "check":
        print(f"stilts-lab {args.command}: --manifest is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        exp = open_experiment(args) if args.manifest else None
        code = COMMANDS[args.command](exp, args)
    except (ConfigError, store.ManifestError, store.CheckpointError, D.DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as err:
        print(f"aborted: {err}", file=sys.stderr)
        return EXIT_ABORT
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
