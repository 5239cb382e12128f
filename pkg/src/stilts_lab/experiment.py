"""Turn a JSON manifest into datasets, a vocabulary, an encoder config,
regime plans and a pretrained encoder.

A manifest looks like::

    {
      "seed": 0, "restarts": 10, "cap": 200, "epsilon": 2.0,
      "encoder": {"d_model": 64, "n_layers": 2, "dropout_rate": 0.0},
      "vocab": {"max_size": 512},
      "corpora": {"lm": {"generator": "synthetic_lm", "grammar_seed": 7, "n_sentences": 4000}},
      "pretrain": {"corpus": "lm", "phase": {"objective": "lm_only", "epochs": 3}},
      "tasks": {
        "synth_target": {"generator": "synthetic", "grammar_seed": 7, "part": "target"},
        "synth_inter": {"generator": "synthetic", "grammar_seed": 7, "part": "related"}
      },
      "phases": {"intermediate": {"epochs": 15, "seed": 0}, "target": {}},
      "plans": [{"regime": "baseline", "target": "synth_target"},
                {"regime": "stilts", "intermediate": "synth_inter", "target": "synth_target"}]
    }

Relative data paths resolve against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import datakit as D
from . import store
from .encoder import EncoderConfig
from .pipeline import PhaseConfig, PhaseResult, RegimePlan, intermediate_key, pretrain_lm
from .encoder import Head

log = logging.getLogger(__name__)

# keys that change where or how fast an experiment runs but not its results
NON_SEMANTIC_KEYS = ("out", "workers", "overrides")


class ConfigError(ValueError):
    """A manifest that cannot be turned into an experiment."""


def semantic_hash(manifest: Mapping[str, Any]) -> str:
    return store.manifest_hash({k: v for k, v in manifest.items() if k not in NON_SEMANTIC_KEYS})


def _section_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Experiment:
    manifest: Dict[str, Any]
    root: Path
    out: Path
    _corpora: Dict[str, List[Tuple[str, ...]]] = field(default_factory=dict)
    _datasets: Dict[str, D.Dataset] = field(default_factory=dict)
    _vocab: Optional[D.Vocab] = None

    @classmethod
    def from_manifest(cls, manifest: Mapping[str, Any], root=".", out=None) -> "Experiment":
        manifest = dict(manifest)
        for key in ("tasks", "plans"):
            if key not in manifest:
                raise ConfigError(f"manifest has no {key!r} section")
        root = Path(root)
        out = Path(out or manifest.get("out") or "runs")
        if not out.is_absolute():
            out = root / out
        return cls(manifest, root, out)

    # simple settings

    def get(self, key: str, default=None):
        return self.manifest.get(key, default)

    @property
    def hash(self) -> str:
        return semantic_hash(self.manifest)

    @property
    def restarts(self) -> int:
        return int(self.get("restarts", 20))

    @property
    def cap(self) -> Optional[int]:
        cap = self.get("cap")
        return None if cap is None else int(cap)

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    @property
    def epsilon(self) -> float:
        return float(self.get("epsilon", 2.0))

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    # data

    def corpus(self, name: str) -> List[Tuple[str, ...]]:
        if name not in self._corpora:
            specs = self.get("corpora", {})
            if name not in specs:
                raise ConfigError(f"unknown corpus {name!r}")
            self._corpora[name] = self._build_corpus(name, specs[name])
        return self._corpora[name]

    def _build_corpus(self, name, spec) -> List[Tuple[str, ...]]:
        if "path" in spec:
            try:
                return D.load_corpus(self._path(spec["path"]))
            except OSError as err:
                raise ConfigError(f"corpus {name}: cannot read {spec['path']}: {err.strerror}") from None
        gen = spec.get("generator")
        if gen == "book":
            return D.book_corpus(int(spec.get("n_sentences", 5000)), int(spec.get("seed", 0)))
        if gen == "synthetic_lm":
            return D.synthetic_lm_corpus(int(spec.get("grammar_seed", 0)), int(spec.get("n_sentences", 4000)),
                                         self.synth_config(spec))
        raise ConfigError(f"corpus {name}: needs a path or a known generator, got {gen!r}")

    def synth_config(self, spec: Mapping) -> D.SynthConfig:
        cfg = dict(self.get("synthetic", {}))
        cfg.update(spec.get("config", {}))
        for k in ("a_len", "b_len"):
            if k in cfg:
                cfg[k] = tuple(cfg[k])
        try:
            return D.SynthConfig(**cfg)
        except TypeError as err:
            raise ConfigError(f"bad synthetic config: {err}") from None

    def dataset(self, name: str) -> D.Dataset:
        if name not in self._datasets:
            specs = self.manifest["tasks"]
            if name not in specs:
                raise ConfigError(f"unknown task {name!r}")
            ds = self._build_dataset(name, specs[name])
            if ds.task.name != name:
                # the manifest key names the task everywhere downstream
                ds = D.Dataset(D.TaskSpec.from_dict({**ds.task.to_dict(), "name": name}),
                               ds.train, ds.dev, ds.test)
            self._datasets[name] = ds
        return self._datasets[name]

    def _build_dataset(self, name, spec) -> D.Dataset:
        gen = spec.get("generator")
        if gen == "synthetic":
            part = spec.get("part", "target")
            if part not in ("target", "related", "unrelated"):
                raise ConfigError(f"task {name}: part must be target, related or unrelated")
            rel = "related" if part == "target" else part
            inter, target = D.gen_synthetic_pair_tasks(int(spec.get("grammar_seed", 0)), rel,
                                                       self.synth_config(spec))
            return target if part == "target" else inter
        if gen == "fake":
            corpus = self.corpus(spec.get("corpus", ""))
            return D.gen_fake_sentences(corpus, int(spec.get("n", 20000)), int(spec.get("seed", 0)),
                                        float(spec.get("dev_fraction", 0.1)))
        if "train" in spec:
            try:
                task = D.TaskSpec.from_dict({"name": name, **spec.get("spec", {})})
            except TypeError as err:
                raise ConfigError(f"task {name}: bad spec: {err}") from None
            columns = spec.get("columns", {"text_a": "sentence", "label": "label"})
            splits = {}
            for split in ("train", "dev"):
                if split not in spec:
                    continue
                try:
                    splits[split] = D.load_tsv(self._path(spec[split]), task, columns,
                                               header=spec.get("header", True), split=split)
                except OSError as err:
                    raise ConfigError(f"task {name}: cannot read {spec[split]}: {err.strerror}") from None
            return D.Dataset(task, **splits)
        raise ConfigError(f"task {name}: needs train/dev paths or a known generator, got {gen!r}")

    def vocab(self) -> D.Vocab:
        if self._vocab is None:
            spec = self.get("vocab", {})
            if "path" in spec:
                self._vocab = D.Vocab.load(self._path(spec["path"]))
            else:
                self._vocab = D.build_vocab(self.vocab_sources(), int(spec.get("max_size", 512)))
        return self._vocab

    def vocab_sources(self):
        """Pretraining corpus plus every task's training text, in manifest order."""
        out = []
        pre = self.get("pretrain", {})
        if pre.get("corpus"):
            out.append(self.corpus(pre["corpus"]))
        for name in self.manifest["tasks"]:
            out.append(list(D.example_texts(self.dataset(name).train)))
        return out

    # model

    def encoder_config(self) -> EncoderConfig:
        cfg = dict(self.get("encoder", {}))
        cfg["vocab_size"] = len(self.vocab())
        try:
            return EncoderConfig(**cfg)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad encoder config: {err}") from None

    def phase(self, name: str) -> PhaseConfig:
        return _phase(self.get("phases", {}).get(name, {}), name)

    def phases(self) -> Dict[str, PhaseConfig]:
        return {name: self.phase(name) for name in self.get("phases", {})}

    def plans(self) -> List[RegimePlan]:
        plans = []
        for i, p in enumerate(self.manifest["plans"]):
            try:
                inter = p.get("intermediate")
                plans.append(RegimePlan(
                    p["regime"], self.dataset(p["target"]),
                    self.dataset(inter) if inter else None,
                    {**self.phases(), **{k: _phase(v, k) for k, v in p.get("phases", {}).items()}},
                    train_cap=p.get("cap", self.cap),
                ))
            except KeyError as err:
                raise ConfigError(f"plan {i}: missing field {err}") from None
            except ValueError as err:
                raise ConfigError(f"plan {i}: {err}") from None
        return plans

    def pretrain_key(self) -> str:
        pre = self.get("pretrain", {})
        corpus = pre.get("corpus")
        return _section_hash(self.encoder_config().to_dict(), self.vocab().tokens, pre,
                             self.get("corpora", {}).get(corpus) if corpus else None,
                             self.get("synthetic", {}))

    def pretrained(self, history: Optional[list] = None) -> Dict[str, np.ndarray]:
        """Pretrained encoder, loaded from ``out/pretrained.ckpt`` when that
        file was written for the same settings, otherwise trained and saved."""
        config = self.encoder_config()
        path = self.out / "pretrained.ckpt"
        key = self.pretrain_key()
        if path.exists():
            try:
                params, _, meta = store.load_checkpoint(path, config)
                if meta.get("pretrain_key") == key:
                    return params
            except store.CheckpointError as err:
                log.warning("ignoring %s: %s", path, err)
        pre = self.get("pretrain", {})
        phase = _phase({"objective": "lm_only", **pre.get("phase", {})}, "pretrain")
        corpus = self.corpus(pre["corpus"]) if pre.get("corpus") else []
        losses = [] if history is None else history
        params = pretrain_lm(config, self.vocab(), corpus, phase, history=losses)
        self.out.mkdir(parents=True, exist_ok=True)
        store.save_checkpoint(path, params, config, {
            "phase_chain": ["pretrain"], "pretrain_key": key, "manifest_hash": self.hash,
            "lm_losses": losses, "seed": phase.seed,
        })
        return params

    # shared intermediate phases on disk

    def load_intermediates(self, pretrained, cache: Dict[str, PhaseResult]) -> None:
        config = self.encoder_config()
        for path in sorted(self.out.glob("intermediate_*.ckpt")):
            try:
                params, _, meta = store.load_checkpoint(path, config)
            except store.CheckpointError as err:
                log.warning("ignoring %s: %s", path, err)
                continue
            head = Head(meta["head_kind"], int(meta["head_n_out"]), params.pop("head.w"), params.pop("head.b"))
            cache[meta["key"]] = PhaseResult(params, head, meta["dev_trace"], int(meta["steps"]),
                                             tuple(meta["start_state"]))

    def save_intermediates(self, pretrained, cache: Mapping[str, PhaseResult]) -> None:
        config = self.encoder_config()
        self.out.mkdir(parents=True, exist_ok=True)
        for plan in self.plans():
            phase = plan.phase("intermediate")
            if plan.regime != "stilts" or phase.seed is None:
                continue
            key = intermediate_key(pretrained, config, plan.intermediate, phase)
            path = self.out / f"intermediate_{plan.intermediate.task.name}_{key}.ckpt"
            if key not in cache or path.exists():
                continue
            res = cache[key]
            store.save_checkpoint(path, {**res.params, **res.head.params("head")}, config, {
                "phase_chain": ["pretrain", "intermediate"], "key": key,
                "intermediate": plan.intermediate.task.name, "manifest_hash": self.hash,
                "head_kind": res.head.kind, "head_n_out": res.head.n_out,
                "dev_trace": res.dev_trace, "steps": res.steps, "start_state": list(res.start_state),
            })


def _phase(spec: Mapping, name: str) -> PhaseConfig:
    try:
        return PhaseConfig.from_dict(spec)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"phase {name}: {err}") from None
