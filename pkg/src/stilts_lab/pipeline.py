"""Training regimes: LM pretraining, single-task fine-tuning, STILTs, and the
two multitask baselines.

Every phase starts from a copy of the incoming encoder parameters, a new
randomly initialised output head, and a zeroed Adam state.  Randomness is
drawn from ``numpy.random.SeedSequence`` children keyed by
``(run seed, stream)`` so the target phase of a STILTs run sees exactly the
same random numbers as the target phase of the matching baseline run.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import metrics as M
from .autodiff import AdamState, Graph, TrainingAborted, adam_step, lr_schedule
from .datakit import Dataset, Example, TaskSpec, Vocab, downsample
from .encoder import EncoderConfig, EncoderGraph, Head, copy_params, init_params, swap_head

log = logging.getLogger(__name__)

OBJECTIVES = ("lm_only", "task_only", "task_plus_aux_lm")
REGIMES = ("baseline", "stilts", "multitask", "multitask_then_target")

# SeedSequence spawn keys, one stream per purpose within a run
STREAM_SUBSAMPLE = 0
STREAM_INTERMEDIATE = 1
STREAM_TARGET = 2
STREAM_MULTITASK = 3
STREAM_PRETRAIN = 4


@dataclass(frozen=True)
class PhaseConfig:
    objective: str = "task_only"
    epochs: int = 3
    batch_size: int = 32
    base_lr: float = 1e-3
    warmup_fraction: float = 0.1
    aux_weight: float = 0.5
    seed: Optional[int] = None
    train_cap: Optional[int] = None
    mask_rate: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.objective == "task_plus_aux_lm" and self.aux_weight <= 0:
            raise ValueError("task_plus_aux_lm needs aux_weight > 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhaseConfig":
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


def phase_stream(phase: PhaseConfig, run_seed: int, stream: int) -> np.random.SeedSequence:
    """Random stream for one phase of one run.

    A phase with its own ``seed`` ignores the run seed, so every restart
    replays the identical phase; that is how a single intermediate model is
    shared by many target restarts.
    """
    base = run_seed if phase.seed is None else phase.seed
    return np.random.SeedSequence(base, spawn_key=(stream,))


# the batch size and learning rate used for BERT
BERT_STYLE_PHASE = PhaseConfig(batch_size=24, base_lr=2e-5)


# input encoding


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    ids_b: Optional[np.ndarray] = None
    mask_b: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)


def _pad(rows: Sequence[Sequence[int]], pad_id: int) -> Tuple[np.ndarray, np.ndarray]:
    t = max(len(r) for r in rows)
    ids = np.full((len(rows), t), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), t), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = True
    return ids, mask


def _truncate_pair(a: List[int], b: List[int], budget: int) -> Tuple[List[int], List[int]]:
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def make_batch(examples: Sequence[Example], vocab: Vocab, config: EncoderConfig) -> Batch:
    """Joint ``[CLS] a [SEP] b [SEP]`` inputs, or two independent
    ``[CLS] x [SEP]`` inputs under siamese pooling."""
    cls_id, sep_id, pad_id = vocab.cls_id, vocab.sep_id, vocab.pad_id
    labels = np.array([ex.label for ex in examples])
    if config.pooling == "siamese_pair":
        if any(ex.text_b is None for ex in examples):
            raise ValueError("siamese_pair pooling is only defined for sentence-pair tasks")
        budget = config.max_len - 2
        ra = [[cls_id] + vocab.ids(ex.text_a)[:budget] + [sep_id] for ex in examples]
        rb = [[cls_id] + vocab.ids(ex.text_b)[:budget] + [sep_id] for ex in examples]
        ids, mask = _pad(ra, pad_id)
        ids_b, mask_b = _pad(rb, pad_id)
        return Batch(ids, mask, labels, ids_b, mask_b)
    rows = []
    for ex in examples:
        a = vocab.ids(ex.text_a)
        if ex.text_b is None:
            rows.append([cls_id] + a[: config.max_len - 2] + [sep_id])
        else:
            a, b = _truncate_pair(a, vocab.ids(ex.text_b), config.max_len - 3)
            rows.append([cls_id] + a + [sep_id] + b + [sep_id])
    ids, mask = _pad(rows, pad_id)
    return Batch(ids, mask, labels)


def lm_batch(sentences: Sequence[Sequence[str]], vocab: Vocab, config: EncoderConfig) -> Tuple[np.ndarray, np.ndarray]:
    rows = [[vocab.cls_id] + vocab.ids(s)[: config.max_len - 2] + [vocab.sep_id] for s in sentences]
    return _pad(rows, vocab.pad_id)


def mask_tokens(ids: np.ndarray, mask: np.ndarray, vocab: Vocab, rate: float,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replace ``rate`` of the non-special positions with [MASK].

    At least one position per sequence is masked.  Returns
    (masked ids, batch rows, positions) of the masked slots.
    """
    special = {vocab.pad_id, vocab.cls_id, vocab.sep_id}
    candidate = mask & ~np.isin(ids, list(special))
    pick = candidate & (rng.random(ids.shape) < rate)
    for i in np.flatnonzero(candidate.any(axis=1) & ~pick.any(axis=1)):
        choices = np.flatnonzero(candidate[i])
        pick[i, choices[int(rng.integers(choices.size))]] = True
    rows, cols = np.nonzero(pick)
    masked = ids.copy()
    masked[rows, cols] = vocab.mask_id
    return masked, rows, cols


# losses


def lm_loss(eg: EncoderGraph, ids: np.ndarray, mask: np.ndarray, vocab: Vocab,
            rate: float, rng: np.random.Generator) -> Optional[int]:
    """Masked-LM or next-token loss node; ``None`` if nothing is predictable."""
    g = eg.g
    if eg.config.causal:
        hidden = eg.encode(ids, mask)
        rows, cols = np.nonzero(mask[:, :-1] & mask[:, 1:])
        if rows.size == 0:
            return None
        targets = ids[rows, cols + 1]
    else:
        masked, rows, cols = mask_tokens(ids, mask, vocab, rate, rng)
        if rows.size == 0:
            return None
        hidden = eg.encode(masked, mask)
        targets = ids[rows, cols]
    return g.cross_entropy(eg.lm_logits(hidden, rows, cols), targets)


def pooled(eg: EncoderGraph, batch: Batch) -> Tuple[int, int]:
    """(pooled node, joint hidden-state node)."""
    mode = eg.config.pooling
    hidden = eg.encode(batch.ids, batch.mask)
    if mode == "cls_token":
        return eg.pool_first(hidden), hidden
    if mode == "last_token":
        return eg.pool_last(hidden, batch.mask), hidden
    if batch.ids_b is None:
        raise ValueError("siamese_pair pooling is only defined for sentence-pair tasks")
    hidden_b = eg.encode(batch.ids_b, batch.mask_b)
    u = eg.pool_max_project(hidden, batch.mask)
    v = eg.pool_max_project(hidden_b, batch.mask_b)
    return eg.siamese(u, v), hidden


def task_loss(eg: EncoderGraph, batch: Batch, head: Head, prefix: str) -> Tuple[int, int]:
    """(loss node, output node) for one labelled batch."""
    g = eg.g
    p, _ = pooled(eg, batch)
    w = g.param(f"{prefix}.w", head.w)
    b = g.param(f"{prefix}.b", head.b)
    out = g.add(g.matmul(p, w), b)
    if head.kind == "regression":
        return g.mse(g.reshape(out, (len(batch),)), g.const(batch.labels.astype(np.float64))), out
    return g.cross_entropy(out, batch.labels.astype(np.int64)), out


@dataclass
class StepLoss:
    total: int
    task: Optional[int]
    lm: Optional[int]


def phase_loss(eg: EncoderGraph, batch: Batch, head: Optional[Head], prefix: str,
               phase: PhaseConfig, vocab: Vocab, rng: np.random.Generator) -> StepLoss:
    """Loss nodes for one step: task loss, LM loss, or task + weight * LM."""
    g = eg.g
    t_node = lm_node = None
    if phase.objective in ("task_only", "task_plus_aux_lm"):
        t_node, _ = task_loss(eg, batch, head, prefix)
    if phase.objective in ("lm_only", "task_plus_aux_lm"):
        lm_node = lm_loss(eg, batch.ids, batch.mask, vocab, phase.mask_rate, rng)
    if phase.objective == "lm_only":
        if lm_node is None:
            raise ValueError("LM batch has no predictable positions")
        return StepLoss(lm_node, None, lm_node)
    if lm_node is None or phase.objective == "task_only":
        return StepLoss(t_node, t_node, None)
    return StepLoss(g.add(t_node, g.scale(lm_node, phase.aux_weight)), t_node, lm_node)


# prediction and evaluation


def predict(params: Mapping[str, np.ndarray], head: Head, config: EncoderConfig, vocab: Vocab,
            examples: Sequence[Example], batch_size: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(examples), batch_size):
        batch = make_batch(examples[i:i + batch_size], vocab, config)
        eg = EncoderGraph(Graph(), params, config)
        p, _ = pooled(eg, batch)
        out = eg.g.value(p) @ head.w + head.b
        preds.append(out[:, 0] if head.kind == "regression" else np.argmax(out, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0)


def evaluate(params, head: Head, config: EncoderConfig, vocab: Vocab, task: TaskSpec,
             examples: Sequence[Example]) -> Dict[str, float]:
    if not examples:
        return {}
    preds = predict(params, head, config, vocab, examples)
    golds = np.array([ex.label for ex in examples])
    out = {}
    for m in task.metrics:
        try:
            out[m] = M.compute(m, preds, golds)
        except M.MetricError:
            # constant predictions leave correlations undefined; score them at chance
            out[m] = float(task.chance[m])
    return out


# phases


def _check_loss(g: Graph, node: int, where: str) -> float:
    value = float(g.value(node))
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite loss in {where}")
    return value


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def pretrain_lm(config: EncoderConfig, vocab: Vocab, corpus: Sequence[Sequence[str]],
                phase: PhaseConfig, params: Optional[Mapping[str, np.ndarray]] = None,
                history: Optional[List[float]] = None) -> Dict[str, np.ndarray]:
    """Train the encoder with its LM objective; returns the final params.

    Per-epoch mean losses are appended to ``history`` when given.
    """
    root = phase_stream(phase, 0, STREAM_PRETRAIN)
    init_ss, order_ss, drop_ss, mask_ss = root.spawn(4)
    if params is None:
        params = init_params(config, int(init_ss.generate_state(1)[0]))
    params = copy_params(params)
    if phase.epochs == 0 or not corpus:
        return params
    order_rng, drop_rng, mask_rng = (np.random.default_rng(s) for s in (order_ss, drop_ss, mask_ss))
    steps_per_epoch = math.ceil(len(corpus) / phase.batch_size)
    total = phase.epochs * steps_per_epoch
    state = AdamState.fresh(params, phase.beta1, phase.beta2, phase.eps)
    step = 0
    epoch_losses = []
    for epoch in range(phase.epochs):
        losses = []
        for idx in _epoch_batches(len(corpus), phase.batch_size, order_rng):
            ids, mask = lm_batch([corpus[i] for i in idx], vocab, config)
            eg = EncoderGraph(Graph(), params, config, drop_rng)
            node = lm_loss(eg, ids, mask, vocab, phase.mask_rate, mask_rng)
            if node is None:
                step += 1
                continue
            losses.append(_check_loss(eg.g, node, f"LM pretraining epoch {epoch}"))
            grads = eg.g.named_grads(eg.g.backward(node))
            lr = lr_schedule(step, total, phase.base_lr, phase.warmup_fraction)
            params, state = adam_step(params, grads, state, lr)
            step += 1
        epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("pretrain epoch %d: mean LM loss %.4f", epoch, epoch_losses[-1])
    if len(epoch_losses) >= 2 and epoch_losses[1] > epoch_losses[0]:
        log.warning("LM loss rose from epoch 0 to epoch 1 (%.4f -> %.4f)", epoch_losses[0], epoch_losses[1])
    if history is not None:
        history.extend(epoch_losses)
    return params


@dataclass
class PhaseResult:
    params: Dict[str, np.ndarray]
    head: Head
    dev_trace: List[Dict[str, float]]
    steps: int
    start_state: Tuple[int, float]  # (Adam step, max |moment|) when the phase began


def run_phase(params: Mapping[str, np.ndarray], config: EncoderConfig, vocab: Vocab,
              task: TaskSpec, train: Sequence[Example], dev: Sequence[Example],
              phase: PhaseConfig, stream: np.random.SeedSequence,
              old_head: Optional[Head] = None,
              on_step: Optional[Callable[[int, AdamState, Head], None]] = None) -> PhaseResult:
    """One fine-tuning phase on a single task.

    Builds a fresh head and a fresh optimizer, runs
    ``epochs * ceil(len(train) / batch_size)`` Adam steps over the whole
    model, and evaluates on ``dev`` after every epoch.
    """
    if not train:
        raise ValueError(f"run_phase: empty training split for {task.name}")
    head_ss, order_ss, drop_ss, mask_ss = stream.spawn(4)
    head = swap_head(old_head, task, config, head_ss)
    order_rng, drop_rng, mask_rng = (np.random.default_rng(s) for s in (order_ss, drop_ss, mask_ss))

    trainable = copy_params(params)
    trainable.update(head.params())
    state = AdamState.fresh(trainable, phase.beta1, phase.beta2, phase.eps)
    start = (state.step, max(float(np.max(np.abs(m))) for m in state.m.values()))
    steps_per_epoch = math.ceil(len(train) / phase.batch_size)
    total = phase.epochs * steps_per_epoch
    trace = []
    step = 0
    for epoch in range(phase.epochs):
        for idx in _epoch_batches(len(train), phase.batch_size, order_rng):
            batch = make_batch([train[i] for i in idx], vocab, config)
            eg = EncoderGraph(Graph(), {k: v for k, v in trainable.items() if not k.startswith("head.")},
                              config, drop_rng)
            cur_head = head.with_params(trainable)
            loss = phase_loss(eg, batch, cur_head, "head", phase, vocab, mask_rng)
            _check_loss(eg.g, loss.total, f"{task.name} epoch {epoch}")
            grads = eg.g.named_grads(eg.g.backward(loss.total))
            if on_step is not None:
                on_step(step, state, cur_head)
            lr = lr_schedule(step, total, phase.base_lr, phase.warmup_fraction)
            trainable, state = adam_step(trainable, grads, state, lr)
            step += 1
        enc = {k: v for k, v in trainable.items() if not k.startswith("head.")}
        trace.append(evaluate(enc, head.with_params(trainable), config, vocab, task, dev))
    enc = {k: v for k, v in trainable.items() if not k.startswith("head.")}
    return PhaseResult(enc, head.with_params(trainable), trace, step, start)


def sample_task_schedule(sizes: Sequence[int], n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Per-step task indices drawn with probability proportional to ``sizes``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("sample_task_schedule: every task needs a non-empty training set")
    return rng.choice(len(sizes), size=n_steps, p=sizes / sizes.sum())


def run_multitask_phase(params: Mapping[str, np.ndarray], config: EncoderConfig, vocab: Vocab,
                        tasks: Sequence[Tuple[TaskSpec, Sequence[Example]]],
                        dev_task: int, dev: Sequence[Example], phase: PhaseConfig,
                        stream: np.random.SeedSequence) -> PhaseResult:
    """One phase over several tasks with shared encoder and one head each.

    Each step picks a task with probability proportional to its training
    set size and takes the next batch from that task; losses are not
    weighted.  ``epochs`` counts passes over the combined data.
    """
    sched_ss, order_ss, drop_ss, mask_ss, *head_ss = stream.spawn(4 + len(tasks))
    heads = [swap_head(None, t, config, s) for (t, _), s in zip(tasks, head_ss)]
    prefixes = [f"head.{i}" for i in range(len(tasks))]
    drop_rng, mask_rng, order_rng = (np.random.default_rng(s) for s in (drop_ss, mask_ss, order_ss))

    trainable = copy_params(params)
    for h, p in zip(heads, prefixes):
        trainable.update(h.params(p))
    state = AdamState.fresh(trainable, phase.beta1, phase.beta2, phase.eps)
    start = (state.step, 0.0)
    sizes = [len(ex) for _, ex in tasks]
    steps_per_epoch = math.ceil(sum(sizes) / phase.batch_size)
    total = phase.epochs * steps_per_epoch
    schedule = sample_task_schedule(sizes, total, np.random.default_rng(sched_ss))

    queues: List[List[int]] = [[] for _ in tasks]

    def next_batch(t: int) -> List[int]:
        out: List[int] = []
        while len(out) < phase.batch_size:
            if not queues[t]:
                queues[t] = order_rng.permutation(sizes[t]).tolist()
            take = min(phase.batch_size - len(out), len(queues[t]))
            out += queues[t][:take]
            del queues[t][:take]
            if sizes[t] < phase.batch_size and not queues[t]:
                break
        return out

    def split(tp):
        enc = {k: v for k, v in tp.items() if not k.startswith("head.")}
        return enc, [h.with_params(tp, p) for h, p in zip(heads, prefixes)]

    trace = []
    for step, t in enumerate(schedule):
        task, examples = tasks[t]
        batch = make_batch([examples[i] for i in next_batch(int(t))], vocab, config)
        enc, cur_heads = split(trainable)
        eg = EncoderGraph(Graph(), enc, config, drop_rng)
        loss = phase_loss(eg, batch, cur_heads[t], prefixes[t], phase, vocab, mask_rng)
        _check_loss(eg.g, loss.total, f"multitask step {step}")
        grads = eg.g.named_grads(eg.g.backward(loss.total))
        lr = lr_schedule(step, total, phase.base_lr, phase.warmup_fraction)
        trainable, state = adam_step(trainable, grads, state, lr)
        if (step + 1) % steps_per_epoch == 0:
            enc, cur_heads = split(trainable)
            trace.append(evaluate(enc, cur_heads[dev_task], config, vocab, tasks[dev_task][0], dev))
    enc, cur_heads = split(trainable)
    return PhaseResult(enc, cur_heads[dev_task], trace, total, start)


# regimes


@dataclass
class RegimePlan:
    regime: str
    target: Dataset
    intermediate: Optional[Dataset] = None
    phases: Dict[str, PhaseConfig] = field(default_factory=dict)
    train_cap: Optional[int] = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.regime == "baseline" and self.intermediate is not None:
            raise ValueError("the baseline regime takes no intermediate task")
        if self.regime != "baseline" and self.intermediate is None:
            raise ValueError(f"regime {self.regime} needs an intermediate task")
        if self.regime == "stilts" and self.intermediate.task.name == self.target.task.name:
            raise ValueError(
                f"intermediate and target are both {self.target.task.name}; "
                "report the baseline result for this cell instead")

    def phase(self, name: str) -> PhaseConfig:
        if name in self.phases:
            return self.phases[name]
        if name == "multitask" and "intermediate" in self.phases:
            return self.phases["intermediate"]
        return PhaseConfig()

    @property
    def label(self) -> str:
        inter = self.intermediate.task.name if self.intermediate else None
        tgt = self.target.task.name
        return {
            "baseline": tgt,
            "stilts": f"{inter}->{tgt}",
            "multitask": f"{{{inter},{tgt}}}",
            "multitask_then_target": f"{{{inter},{tgt}}}->{tgt}",
        }[self.regime]


@dataclass
class RunRecord:
    regime: str
    intermediate: Optional[str]
    target: str
    seed: int
    train_cap: Optional[int]
    train_size: int
    scores: Dict[str, float]
    primary: float
    degenerate: bool = False
    aborted: bool = False
    wall_time: float = 0.0
    dev_trace: List[Dict[str, float]] = field(default_factory=list)
    manifest_hash: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        return cls(**dict(d))


def target_train(plan: RegimePlan, seed: int) -> List[Example]:
    """The target training split for one run, re-subsampled per seed."""
    train = plan.target.train
    if plan.train_cap is None:
        return list(train)
    ss = np.random.SeedSequence(seed, spawn_key=(STREAM_SUBSAMPLE,))
    return downsample(train, plan.train_cap, int(ss.generate_state(1)[0]))


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def examples_digest(examples: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(repr((ex.guid, ex.text_a, ex.text_b, ex.label)).encode("utf-8"))
    return h.hexdigest()[:16]


def intermediate_key(pretrained: Mapping[str, np.ndarray], config: EncoderConfig,
                     intermediate: Dataset, phase: PhaseConfig) -> str:
    """Cache key for a fixed-seed intermediate phase."""
    parts = [params_digest(pretrained), repr(sorted(config.to_dict().items())), intermediate.task.name,
             examples_digest(intermediate.train), examples_digest(intermediate.dev),
             repr(sorted(phase.to_dict().items()))]
    return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()[:16]


def intermediate_phase(pretrained: Mapping[str, np.ndarray], config: EncoderConfig, vocab: Vocab,
                       intermediate: Dataset, phase: PhaseConfig, seed: int,
                       cache: Optional[Dict[str, PhaseResult]] = None) -> PhaseResult:
    """Phase 2 of a STILTs run.

    When ``phase.seed`` is fixed the result does not depend on the run seed
    and is memoised in ``cache``.
    """
    key = None
    if cache is not None and phase.seed is not None:
        key = intermediate_key(pretrained, config, intermediate, phase)
        if key in cache:
            return cache[key]
    res = run_phase(pretrained, config, vocab, intermediate.task, intermediate.train, intermediate.dev,
                    phase, phase_stream(phase, seed, STREAM_INTERMEDIATE))
    if key is not None:
        cache[key] = res
    return res


def run_stilts(pretrained: Mapping[str, np.ndarray], config: EncoderConfig, vocab: Vocab,
               intermediate: Dataset, target: Dataset, phases: Mapping[str, PhaseConfig],
               seed: int, train: Optional[Sequence[Example]] = None,
               cache: Optional[Dict[str, PhaseResult]] = None) -> Tuple[PhaseResult, PhaseResult]:
    """Intermediate phase then target phase; returns both phase results."""
    if intermediate.task.name == target.task.name:
        raise ValueError(f"intermediate and target are both {target.task.name}; "
                         "report the baseline result for this cell instead")
    target_phase = phases.get("target", PhaseConfig())
    mid = intermediate_phase(pretrained, config, vocab, intermediate,
                             phases.get("intermediate", PhaseConfig()), seed, cache)
    final = run_phase(mid.params, config, vocab, target.task, target.train if train is None else train,
                      target.dev, target_phase, phase_stream(target_phase, seed, STREAM_TARGET),
                      old_head=mid.head)
    return mid, final


def run_multitask(pretrained: Mapping[str, np.ndarray], config: EncoderConfig, vocab: Vocab,
                  intermediate: Dataset, target: Dataset, phases: Mapping[str, PhaseConfig],
                  seed: int, then_target: bool = False,
                  train: Optional[Sequence[Example]] = None) -> PhaseResult:
    train = target.train if train is None else train
    if not intermediate.train or not train:
        raise ValueError("run_multitask: both tasks need training data")
    # the multitask phase sees the per-run target subsample, so it is never shared
    mt_phase = phases.get("multitask", phases.get("intermediate", PhaseConfig()))
    res = run_multitask_phase(pretrained, config, vocab,
                              [(intermediate.task, intermediate.train), (target.task, train)],
                              1, target.dev, mt_phase,
                              np.random.SeedSequence(seed, spawn_key=(STREAM_MULTITASK,)))
    if not then_target:
        return res
    target_phase = phases.get("target", PhaseConfig())
    return run_phase(res.params, config, vocab, target.task, train, target.dev, target_phase,
                     phase_stream(target_phase, seed, STREAM_TARGET), old_head=res.head)


def prepare_shared(plan: "RegimePlan", pretrained: Mapping[str, np.ndarray], config: EncoderConfig,
                   vocab: Vocab, cache: Dict[str, PhaseResult]) -> None:
    """Run a plan's fixed-seed intermediate phase once, ahead of its restarts."""
    phase = plan.phase("intermediate")
    if plan.regime == "stilts" and phase.seed is not None:
        intermediate_phase(pretrained, config, vocab, plan.intermediate, phase, 0, cache)


def run_regime(plan: RegimePlan, pretrained: Mapping[str, np.ndarray], config: EncoderConfig,
               vocab: Vocab, seed: int, epsilon: float = 2.0,
               cache: Optional[Dict[str, PhaseResult]] = None) -> RunRecord:
    """Run one plan under one seed.

    A run that aborts on a non-finite loss or gradient is recorded at the
    target's chance score and flagged degenerate.
    """
    started = time.perf_counter()
    task = plan.target.task
    train = target_train(plan, seed)
    aborted = False
    try:
        if plan.regime == "baseline":
            res = run_phase(pretrained, config, vocab, task, train, plan.target.dev, plan.phase("target"),
                            phase_stream(plan.phase("target"), seed, STREAM_TARGET))
        elif plan.regime == "stilts":
            _, res = run_stilts(pretrained, config, vocab, plan.intermediate, plan.target,
                                {"intermediate": plan.phase("intermediate"), "target": plan.phase("target")},
                                seed, train, cache)
        else:
            res = run_multitask(pretrained, config, vocab, plan.intermediate, plan.target,
                                {"multitask": plan.phase("multitask"), "target": plan.phase("target")},
                                seed, then_target=plan.regime == "multitask_then_target", train=train)
        trace = res.dev_trace
        scores = dict(trace[-1]) if trace else {m: float(task.chance[m]) for m in task.metrics}
    except TrainingAborted as err:
        log.warning("run %s seed %d aborted: %s", plan.label, seed, err)
        aborted = True
        trace = []
        scores = {m: float(task.chance[m]) for m in task.metrics}
    primary = scores[task.primary_metric]
    return RunRecord(
        regime=plan.regime,
        intermediate=plan.intermediate.task.name if plan.intermediate else None,
        target=task.name,
        seed=seed,
        train_cap=plan.train_cap,
        train_size=len(train),
        scores=scores,
        primary=primary,
        degenerate=aborted or abs(primary - task.chance_score) <= epsilon,
        aborted=aborted,
        wall_time=time.perf_counter() - started,
        dev_trace=trace,
    )
