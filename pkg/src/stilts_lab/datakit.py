"""Datasets, vocabulary, and the data generators used by the experiments.

Text is lowercased and split on whitespace; a "word" is a whitespace token
and punctuation stays attached.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)


class DataError(ValueError):
    pass


def tokenize(text: str) -> Tuple[str, ...]:
    return tuple(text.lower().split())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    arity: str = "single"  # "single" | "pair"
    label_kind: str = "classification"  # "classification" | "regression"
    n_classes: int = 2
    metrics: Tuple[str, ...] = ("accuracy",)
    chance: Mapping[str, float] = field(default_factory=lambda: {"accuracy": 50.0})

    def __post_init__(self):
        if self.arity not in ("single", "pair"):
            raise DataError(f"task {self.name}: arity must be 'single' or 'pair'")
        if self.label_kind not in ("classification", "regression"):
            raise DataError(f"task {self.name}: unknown label kind {self.label_kind!r}")
        if not self.metrics:
            raise DataError(f"task {self.name}: no metrics")
        object.__setattr__(self, "metrics", tuple(self.metrics))
        missing = [m for m in self.metrics if m not in self.chance]
        if missing:
            raise DataError(f"task {self.name}: no chance score for metric {missing[0]}")

    @property
    def primary_metric(self) -> str:
        return self.metrics[0]

    @property
    def chance_score(self) -> float:
        return float(self.chance[self.primary_metric])

    def to_dict(self) -> dict:
        return {"name": self.name, "arity": self.arity, "label_kind": self.label_kind,
                "n_classes": self.n_classes, "metrics": list(self.metrics), "chance": dict(self.chance)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        d = dict(d)
        d["metrics"] = tuple(d.get("metrics", ("accuracy",)))
        return cls(**d)


@dataclass(frozen=True)
class Example:
    guid: str
    text_a: Tuple[str, ...]
    text_b: Optional[Tuple[str, ...]]
    label: Union[int, float]


@dataclass
class Dataset:
    task: TaskSpec
    train: List[Example] = field(default_factory=list)
    dev: List[Example] = field(default_factory=list)
    test: List[Example] = field(default_factory=list)

    def __post_init__(self):
        for name in ("train", "dev", "test"):
            validate_split(getattr(self, name), self.task, name)


def validate_example(ex: Example, task: TaskSpec, where: str = "") -> None:
    if (ex.text_b is not None) != (task.arity == "pair"):
        raise DataError(f"{where}example {ex.guid}: arity mismatch for {task.arity} task {task.name}")
    if task.label_kind == "classification":
        if not isinstance(ex.label, (int, np.integer)) or not 0 <= ex.label < task.n_classes:
            raise DataError(f"{where}example {ex.guid}: label {ex.label!r} is not a class index < {task.n_classes}")
    elif not np.isfinite(ex.label):
        raise DataError(f"{where}example {ex.guid}: regression label must be finite")


def validate_split(examples: Sequence[Example], task: TaskSpec, name: str = "split") -> None:
    seen = set()
    for ex in examples:
        validate_example(ex, task, f"{name}: ")
        if ex.guid in seen:
            raise DataError(f"{name}: duplicate guid {ex.guid}")
        seen.add(ex.guid)


# TSV


def _parse_label(raw: str, task: TaskSpec):
    if task.label_kind == "classification":
        return int(raw)
    value = float(raw)
    if not np.isfinite(value):
        raise ValueError(raw)
    return value


def load_tsv(path, task: TaskSpec, columns: Mapping[str, Union[str, int]],
             header: bool = True, split: str = "train") -> List[Example]:
    """Read one split from a tab-separated file.

    ``columns`` maps ``text_a``, ``label``, and for pair tasks ``text_b``
    (optionally ``guid``) to header names or 0-based indices.
    """
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))
    names: List[str] = rows[0] if header and rows else []
    body = rows[1:] if header else rows
    first_line = 2 if header else 1

    needed = ["text_a", "label"] + (["text_b"] if task.arity == "pair" else [])
    index: Dict[str, int] = {}
    for key in needed + (["guid"] if "guid" in columns else []):
        if key not in columns:
            raise DataError(f"{path}: column map has no entry for {key!r}")
        col = columns[key]
        if isinstance(col, int):
            index[key] = col
        elif col in names:
            index[key] = names.index(col)
        else:
            raise DataError(f"{path}: missing column {col!r} (for {key})")

    out = []
    for i, row in enumerate(body):
        line = first_line + i
        if not row:
            continue
        try:
            fields = {k: row[j] for k, j in index.items()}
        except IndexError:
            raise DataError(f"{path}: row {line} has {len(row)} fields, too few for the column map") from None
        try:
            label = _parse_label(fields["label"], task)
        except ValueError:
            raise DataError(f"{path}: row {line}: unparsable label {fields['label']!r}") from None
        text_b = tokenize(fields["text_b"]) if "text_b" in fields else None
        ex = Example(fields.get("guid", f"{split}-{i}"), tokenize(fields["text_a"]), text_b, label)
        try:
            validate_example(ex, task)
        except DataError as err:
            raise DataError(f"{path}: row {line}: {err}") from None
        out.append(ex)
    validate_split(out, task, str(path))
    return out


def write_tsv(path, examples: Sequence[Example], task: TaskSpec) -> None:
    cols = ["guid", "text_a"] + (["text_b"] if task.arity == "pair" else []) + ["label"]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
        w.writerow(cols)
        for ex in examples:
            row = [ex.guid, detokenize(ex.text_a)]
            if task.arity == "pair":
                row.append(detokenize(ex.text_b))
            row.append(repr(float(ex.label)) if task.label_kind == "regression" else str(int(ex.label)))
            w.writerow(row)


def load_corpus(path) -> List[Tuple[str, ...]]:
    """One sentence per line; blank lines dropped."""
    with Path(path).open(encoding="utf-8") as fh:
        return [t for t in (tokenize(line) for line in fh) if t]


# vocabulary


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary has duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def ids(self, tokens: Iterable[str]) -> List[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def build_vocab(corpora: Iterable[Iterable[Sequence[str]]], max_size: int,
                specials: Sequence[str] = SPECIALS) -> Vocab:
    """Specials first, then tokens by descending count, ties alphabetical."""
    if max_size < len(specials):
        raise DataError(f"max_size {max_size} is smaller than the {len(specials)} special tokens")
    counts: Counter = Counter()
    for corpus in corpora:
        for sent in corpus:
            counts.update(sent)
    for s in specials:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(specials) + [t for t, _ in ranked[: max_size - len(specials)]])


def example_texts(examples: Iterable[Example]) -> Iterable[Tuple[str, ...]]:
    for ex in examples:
        yield ex.text_a
        if ex.text_b is not None:
            yield ex.text_b


# generators

REAL_FAKE = TaskSpec("real_fake", "single", "classification", 2, ("accuracy",), {"accuracy": 50.0})
MIN_FAKE_TOKENS = 8
MAX_REROLLS = 10


def swap_pairs(tokens: Sequence[str], rng: np.random.Generator) -> Tuple[Tuple[str, ...], int]:
    """Swap k in {2,3,4} pairs at 2k distinct positions; returns (tokens, k)."""
    k = int(rng.integers(2, 5))
    pos = rng.choice(len(tokens), size=2 * k, replace=False)
    out = list(tokens)
    for i in range(k):
        a, b = pos[2 * i], pos[2 * i + 1]
        out[a], out[b] = out[b], out[a]
    return tuple(out), k


def gen_fake_sentences(corpus: Sequence[Sequence[str]], n: int, seed: int,
                       dev_fraction: float = 0.0, sources: Optional[Dict[str, Tuple[str, ...]]] = None) -> Dataset:
    """Real/fake sentence detection: n/2 corpus sentences (label 1) and n/2
    corrupted copies (label 0), shuffled.

    Only sentences with at least 8 tokens are used, for both classes, so
    length does not give the label away.  A corrupted copy that happens to
    equal its source is re-rolled up to 10 times before the source is
    abandoned for another.  If ``sources`` is given it is filled with
    guid -> source sentence for every fake.
    """
    if n % 2:
        raise DataError(f"gen_fake_sentences: n must be even, got {n}")
    eligible = [tuple(s) for s in corpus if len(s) >= MIN_FAKE_TOKENS]
    if not eligible:
        raise DataError(f"gen_fake_sentences: no corpus sentence has >= {MIN_FAKE_TOKENS} tokens")
    rng = np.random.default_rng(seed)
    half = n // 2
    reals = [eligible[i] for i in rng.integers(0, len(eligible), size=half)]
    fakes = []
    skipped = 0
    while len(fakes) < half:
        src = eligible[int(rng.integers(len(eligible)))]
        for _ in range(MAX_REROLLS):
            fake, _ = swap_pairs(src, rng)
            if fake != src:
                fakes.append((fake, src))
                break
        else:
            skipped += 1
            if skipped > 100 * half + 1000:
                raise DataError("gen_fake_sentences: corpus sentences cannot be corrupted (all tokens repeated)")
    items = [(s, 1, None) for s in reals] + [(f, 0, src) for f, src in fakes]
    order = rng.permutation(len(items))
    examples = [Example(f"rf-{j}", items[i][0], None, items[i][1]) for j, i in enumerate(order)]
    if sources is not None:
        sources.update((f"rf-{j}", items[i][2]) for j, i in enumerate(order) if items[i][1] == 0)
    n_dev = int(round(dev_fraction * n))
    return Dataset(REAL_FAKE, train=examples[n_dev:], dev=examples[:n_dev])


def downsample(split: Sequence[Example], cap: int, seed: int) -> List[Example]:
    """Uniform sample of min(cap, len) examples without replacement, shuffled.

    The draw depends only on the set of guids, not on the input order.
    """
    if cap <= 0:
        raise DataError(f"downsample: cap must be positive, got {cap}")
    ordered = sorted(split, key=lambda ex: ex.guid)
    rng = np.random.default_rng(seed)
    take = rng.permutation(len(ordered))[: min(cap, len(ordered))]
    return [ordered[i] for i in take]


# a small English-like corpus for the fake-sentence task and LM pretraining

_DETS = "the a this that every one some another".split()
_ADJS = ("old young quiet bright dark small large warm cold heavy narrow gentle strange "
         "silver broken hidden distant careful tired sudden").split()
_NOUNS = ("man woman child dog house door river window letter garden road city horse boat "
          "teacher doctor friend stranger lamp table chair mountain forest ship king").split()
_VERBS = ("saw found opened carried watched followed painted remembered crossed closed "
          "reached wanted lost kept built wrote touched").split()
_PREPS = "near behind under beside across through toward past".split()
_ADVS = "slowly quickly quietly again finally carefully suddenly".split()


def book_corpus(n_sentences: int, seed: int) -> List[Tuple[str, ...]]:
    """Template sentences with a narrative flavour; most have 8-16 tokens."""
    rng = np.random.default_rng(seed)

    def pick(words):
        return words[int(rng.integers(len(words)))]

    def np_phrase():
        out = [pick(_DETS)]
        if rng.random() < 0.6:
            out.append(pick(_ADJS))
        out.append(pick(_NOUNS))
        return out

    sents = []
    for _ in range(n_sentences):
        subject = np_phrase()
        s = subject + [pick(_VERBS)] + np_phrase()
        if rng.random() < 0.7:
            s += [pick(_PREPS)] + np_phrase()
        if rng.random() < 0.4:
            s.insert(len(subject) + 1, pick(_ADVS))
        sents.append(tuple(s) + (".",))
    return sents


# synthetic related / unrelated pair tasks
#
# Sentences are sequences of items "m<c> <word>": a shared function word
# naming the word's class, then a content word of that class.  The target
# and intermediate tasks draw content words from disjoint vocabularies tied
# by a class-preserving bijection; the function words are common to both.

ENTAIL_TASK_CHANCE = {"accuracy": 50.0}


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 6
    words_per_class: int = 8
    a_len: Tuple[int, int] = (3, 3)
    b_len: Tuple[int, int] = (1, 2)
    n_inter_train: int = 16000
    n_inter_dev: int = 500
    n_target_train: int = 2000
    n_target_dev: int = 1000
    balance: float = 0.5

    def __post_init__(self):
        lo, hi = self.a_len
        if not 1 <= lo <= hi < self.n_classes:
            raise DataError(f"a_len {self.a_len} must lie in [1, n_classes - 1]")
        if not 1 <= self.b_len[0] <= self.b_len[1]:
            raise DataError(f"bad b_len {self.b_len}")
        if self.words_per_class < 1 or not 0 < self.balance < 1:
            raise DataError("words_per_class must be >= 1 and balance in (0, 1)")

    @property
    def n_content(self) -> int:
        return self.n_classes * self.words_per_class


def _sample_items(rng, cfg: SynthConfig, entailed: bool):
    """(a, b) as lists of (class, word index) with distinct classes in a."""
    n_a = int(rng.integers(cfg.a_len[0], cfg.a_len[1] + 1))
    n_b = int(rng.integers(cfg.b_len[0], min(cfg.b_len[1], n_a) + 1))
    classes = rng.choice(cfg.n_classes, size=n_a, replace=False)
    a = [(int(c), int(rng.integers(cfg.words_per_class))) for c in classes]
    b = [a[int(j)] for j in rng.choice(n_a, size=n_b, replace=False)]
    if not entailed:
        # one item of b comes from a class that a does not mention, so its
        # word cannot occur in a
        outside = np.setdiff1d(np.arange(cfg.n_classes), classes)
        b[int(rng.integers(n_b))] = (int(rng.choice(outside)), int(rng.integers(cfg.words_per_class)))
    return a, b


def _entail_pair(rng, cfg: SynthConfig, label: int):
    return _sample_items(rng, cfg, bool(label))


def _parity_pair(rng, cfg: SynthConfig, label: int):
    # label 1 when b has an even number of items, independent of entailment
    while True:
        a, b = _sample_items(rng, cfg, bool(rng.integers(2)))
        if len(b) % 2 == 1 - label:
            return a, b


def _render(items, words: Sequence[str], cfg: SynthConfig) -> Tuple[str, ...]:
    out = []
    for c, w in items:
        out += [f"m{c}", words[c * cfg.words_per_class + w]]
    return tuple(out)


def _make_examples(prefix, n, rng, cfg, words, rule):
    labels = (np.arange(n) < int(round(cfg.balance * n))).astype(int)
    labels = labels[rng.permutation(n)]
    out = []
    for i, y in enumerate(labels):
        a, b = rule(rng, cfg, int(y))
        out.append(Example(f"{prefix}-{i}", _render(a, words, cfg), _render(b, words, cfg), int(y)))
    return out


def synth_task(name: str) -> TaskSpec:
    return TaskSpec(name, "pair", "classification", 2, ("accuracy",), dict(ENTAIL_TASK_CHANCE))


def content_tokens(tokens: Sequence[str]) -> set:
    """The content words of a rendered synthetic sentence."""
    return set(tokens[1::2])


def synthetic_label(text_a: Sequence[str], text_b: Sequence[str]) -> int:
    """1 when every content word of b occurs in a."""
    return int(content_tokens(text_b) <= content_tokens(text_a))


def _vocabularies(root_map, cfg: SynthConfig) -> Tuple[List[str], List[str]]:
    target = [f"t{j:02d}" for j in range(cfg.n_content)]
    rng = np.random.default_rng(root_map)
    inter = [""] * cfg.n_content
    k = cfg.words_per_class
    for c in range(cfg.n_classes):
        perm = rng.permutation(k)
        for w in range(k):
            inter[c * k + w] = f"i{c * k + int(perm[w]):02d}"
    return target, inter


def gen_synthetic_pair_tasks(grammar_seed: int, relatedness: str = "related",
                             cfg: SynthConfig = SynthConfig()) -> Tuple[Dataset, Dataset]:
    """(intermediate, target) token-set entailment datasets.

    Label 1 means every content word of b also occurs in a.  The target task
    uses its own content vocabulary.  Under ``related`` the intermediate task
    is the same family over a disjoint vocabulary tied to the target's by a
    fixed class-preserving bijection; under ``unrelated`` the intermediate
    label is the parity of b's length instead.  The target dataset depends
    only on ``grammar_seed``.
    """
    if relatedness not in ("related", "unrelated"):
        raise DataError(f"unknown relatedness {relatedness!r}")
    s_map, s_target, s_inter, _ = np.random.SeedSequence(grammar_seed).spawn(4)
    target_words, inter_words = _vocabularies(s_map, cfg)

    rng_t = np.random.default_rng(s_target)
    target = Dataset(
        synth_task("synth_target"),
        train=_make_examples("tgt-train", cfg.n_target_train, rng_t, cfg, target_words, _entail_pair),
        dev=_make_examples("tgt-dev", cfg.n_target_dev, rng_t, cfg, target_words, _entail_pair),
    )
    rng_i = np.random.default_rng(s_inter)
    rule = _entail_pair if relatedness == "related" else _parity_pair
    name = "synth_inter" if relatedness == "related" else "synth_parity"
    inter = Dataset(
        synth_task(name),
        train=_make_examples("int-train", cfg.n_inter_train, rng_i, cfg, inter_words, rule),
        dev=_make_examples("int-dev", cfg.n_inter_dev, rng_i, cfg, inter_words, rule),
    )
    return inter, target


def synthetic_lm_corpus(grammar_seed: int, n_sentences: int = 4000,
                        cfg: SynthConfig = SynthConfig()) -> List[Tuple[str, ...]]:
    """Unlabelled sentences over both synthetic vocabularies, half each.

    Drawn from their own random stream, so they are not copies of task
    examples.
    """
    s_map, _, _, s_lm = np.random.SeedSequence(grammar_seed).spawn(4)
    vocabs = _vocabularies(s_map, cfg)
    rng = np.random.default_rng(s_lm)
    out = []
    for i in range(n_sentences):
        a, _ = _sample_items(rng, cfg, True)
        out.append(_render(a, vocabs[i % 2], cfg))
    return out
