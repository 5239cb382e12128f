"""Small pre-norm Transformer sentence encoder built on :mod:`stilts_lab.autodiff`.

Parameters live in a flat ``{name: ndarray}`` dict so they can be copied,
checkpointed and handed to the optimizer without any module machinery.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Graph, ShapeError

POOLING_MODES = ("cls_token", "last_token", "siamese_pair")
OBJECTIVE_STYLES = ("masked_lm", "causal_lm")
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_len: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dropout_rate: float = 0.1
    pooling: str = "cls_token"
    objective_style: str = "masked_lm"

    def __post_init__(self):
        for name in ("vocab_size", "max_len", "d_model", "n_heads", "n_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.objective_style not in OBJECTIVE_STYLES:
            raise ValueError(f"unknown objective_style {self.objective_style!r}")

    @property
    def causal(self) -> bool:
        return self.objective_style == "causal_lm"

    @property
    def pooled_dim(self) -> int:
        return 4 * self.d_model if self.pooling == "siamese_pair" else self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**dict(d))


def param_shapes(config: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every encoder tensor, in canonical order."""
    d, v, ff = config.d_model, config.vocab_size, 4 * config.d_model
    shapes: Dict[str, Tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff.w1": (d, ff), p + "ff.b1": (ff,),
            p + "ff.w2": (ff, d), p + "ff.b2": (d,),
        })
    shapes.update({
        "ln_f.g": (d,), "ln_f.b": (d,),
        "lm.w": (d, v), "lm.b": (v,),
        "pool.w": (d, d), "pool.b": (d,),
    })
    return shapes


def param_count(config: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config: EncoderConfig, seed: int) -> Dict[str, np.ndarray]:
    """Normal(0, 0.02) matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
    return params


def copy_params(params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class Head:
    kind: str  # "classification" or "regression"
    n_out: int
    w: np.ndarray
    b: np.ndarray

    def params(self, prefix: str = "head") -> Dict[str, np.ndarray]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def with_params(self, params: Mapping[str, np.ndarray], prefix: str = "head") -> "Head":
        return Head(self.kind, self.n_out, params[f"{prefix}.w"], params[f"{prefix}.b"])


def new_head(kind: str, n_out: int, pooled_dim: int, rng: np.random.Generator) -> Head:
    if kind == "regression":
        n_out = 1
    elif kind != "classification":
        raise ValueError(f"unknown head kind {kind!r}")
    return Head(kind, n_out, rng.normal(0.0, INIT_STD, size=(pooled_dim, n_out)), np.zeros(n_out))


def swap_head(old: Optional[Head], task, config: EncoderConfig, seed) -> Head:
    """Discard ``old`` and return a freshly initialised head sized for ``task``."""
    del old  # heads are never reused
    rng = np.random.default_rng(seed)
    if task.label_kind == "regression":
        return new_head("regression", 1, config.pooled_dim, rng)
    return new_head("classification", task.n_classes, config.pooled_dim, rng)


# graph construction


class EncoderGraph:
    """Binds a parameter dict to a :class:`Graph` so the encoder can be
    evaluated several times (e.g. two siamese segments) on shared nodes."""

    def __init__(self, g: Graph, params: Mapping[str, np.ndarray], config: EncoderConfig,
                 rng: Optional[np.random.Generator] = None):
        self.g = g
        self.config = config
        self.rng = rng
        self.nodes = {name: g.param(name, value) for name, value in params.items()}

    def _dropout(self, x: int) -> int:
        rate = self.config.dropout_rate
        if self.rng is None or rate == 0:
            return x
        keep = self.rng.random(self.g.value(x).shape) >= rate
        return self.g.dropout(x, keep / (1.0 - rate))

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> int:
        """Hidden states (B, T, d) for token ids (B, T) under a 0/1 key mask."""
        g, P, cfg = self.g, self.nodes, self.config
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if ids.ndim != 2 or mask.shape != ids.shape:
            raise ShapeError(f"encode: incompatible shapes {ids.shape} and {mask.shape}")
        bsz, t = ids.shape
        if t > cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            bad = ids[(ids < 0) | (ids >= cfg.vocab_size)][0]
            raise ValueError(f"token id {bad} out of range for vocab_size {cfg.vocab_size}")

        d, h = cfg.d_model, cfg.n_heads
        dh = d // h
        x = g.add(g.embedding(P["tok_emb"], ids), g.slice(P["pos_emb"], (slice(0, t),)))
        x = self._dropout(x)

        blocked = ~mask[:, None, None, :]
        if cfg.causal:
            blocked = blocked | np.triu(np.ones((t, t), dtype=bool), k=1)[None, None]
        inv_sqrt = 1.0 / math.sqrt(dh)

        def heads(node):
            return g.transpose(g.reshape(node, (bsz, t, h, dh)), (0, 2, 1, 3))

        for i in range(cfg.n_layers):
            p = f"layer{i}."
            a = g.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            q = heads(g.add(g.matmul(a, P[p + "attn.wq"]), P[p + "attn.bq"]))
            k = heads(g.add(g.matmul(a, P[p + "attn.wk"]), P[p + "attn.bk"]))
            v = heads(g.add(g.matmul(a, P[p + "attn.wv"]), P[p + "attn.bv"]))
            scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), inv_sqrt)
            att = g.softmax(g.masked_fill(scores, blocked))
            ctx = g.reshape(g.transpose(g.matmul(att, v), (0, 2, 1, 3)), (bsz, t, d))
            out = g.add(g.matmul(ctx, P[p + "attn.wo"]), P[p + "attn.bo"])
            x = g.add(x, self._dropout(out))

            f = g.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            f = g.gelu(g.add(g.matmul(f, P[p + "ff.w1"]), P[p + "ff.b1"]))
            f = g.add(g.matmul(f, P[p + "ff.w2"]), P[p + "ff.b2"])
            x = g.add(x, self._dropout(f))
        return g.layer_norm(x, P["ln_f.g"], P["ln_f.b"])

    def pool_first(self, hidden: int) -> int:
        return self.g.slice(hidden, (slice(None), 0))

    def pool_last(self, hidden: int, mask: np.ndarray) -> int:
        mask = np.asarray(mask, dtype=bool)
        last = _last_index(mask)
        return self.g.slice(hidden, (np.arange(mask.shape[0]), last))

    def pool_max_project(self, hidden: int, mask: np.ndarray) -> int:
        g = self.g
        mask = np.asarray(mask, dtype=bool)
        filled = g.masked_fill(hidden, ~mask[:, :, None])
        pooled = g.max(filled, axis=1)
        return g.add(g.matmul(pooled, self.nodes["pool.w"]), self.nodes["pool.b"])

    def siamese(self, u: int, v: int) -> int:
        g = self.g
        return g.concat([u, v, g.abs(g.sub(u, v)), g.multiply(u, v)])

    def lm_logits(self, hidden: int, rows: np.ndarray, cols: np.ndarray) -> int:
        """LM logits at (batch row, position) pairs; shape (n, vocab)."""
        picked = self.g.slice(hidden, (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)))
        return self.g.add(self.g.matmul(picked, self.nodes["lm.w"]), self.nodes["lm.b"])


def _last_index(mask: np.ndarray) -> np.ndarray:
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("last_token pooling on an all-padding sequence")
    # last True position, robust to masks with interior zeros
    t = mask.shape[1]
    return t - 1 - np.argmax(mask[:, ::-1], axis=1)


# array-level conveniences


def _as_batch(ids, mask=None):
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    if mask is None:
        mask = np.ones_like(ids, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if single:
            mask = mask[None]
    return ids, mask, single


def encode(params: Mapping[str, np.ndarray], config: EncoderConfig, ids, mask=None) -> np.ndarray:
    """Evaluate the encoder without dropout; accepts (T,) or (B, T) ids."""
    ids, mask, single = _as_batch(ids, mask)
    eg = EncoderGraph(Graph(), params, config)
    h = eg.g.value(eg.encode(ids, mask))
    return h[0] if single else h


def pool(hidden: np.ndarray, mode: str, mask=None, *, hidden_b: Optional[np.ndarray] = None,
         mask_b=None, params: Optional[Mapping[str, np.ndarray]] = None) -> np.ndarray:
    """Pool hidden states (T, d) or (B, T, d).

    ``siamese_pair`` needs the independently encoded second segment in
    ``hidden_b`` and the encoder params for the max-pool projection.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    single = hidden.ndim == 2
    if single:
        hidden = hidden[None]
        if hidden_b is not None:
            hidden_b = np.asarray(hidden_b, dtype=np.float64)[None]
    b, t, _ = hidden.shape
    mask = np.ones((b, t), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(b, -1)
    if mode == "cls_token":
        out = hidden[:, 0]
    elif mode == "last_token":
        out = hidden[np.arange(b), _last_index(mask)]
    elif mode == "siamese_pair":
        if hidden_b is None:
            raise ValueError("siamese_pair pooling needs a second segment; single-segment tasks are not supported")
        if params is None:
            raise ValueError("siamese_pair pooling needs encoder params for the projection")
        mask_b = np.ones(hidden_b.shape[:2], dtype=bool) if mask_b is None else np.asarray(mask_b, bool).reshape(b, -1)

        def project(hs, m):
            filled = np.where(m[:, :, None], hs, -np.inf)
            return filled.max(axis=1) @ params["pool.w"] + params["pool.b"]

        u, v = project(hidden, mask), project(hidden_b, mask_b)
        out = siamese_features(u, v)
    else:
        raise ValueError(f"unknown pooling {mode!r}")
    return out[0] if single else out


def siamese_features(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.concatenate([u, v, np.abs(u - v), u * v], axis=-1)


def lm_logits(params: Mapping[str, np.ndarray], config: EncoderConfig, hidden: np.ndarray,
              positions: Optional[Sequence[int]] = None) -> np.ndarray:
    """LM logits for one sequence's hidden states (T, d).

    Under ``causal_lm`` the row for position i predicts token i+1, so the
    default position set is ``0 .. T-2`` (empty for length-1 inputs).
    Under ``masked_lm`` ``positions`` are the masked slots and must be given.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    t = hidden.shape[0]
    limit = t - 1 if config.causal else t
    if positions is None:
        if not config.causal:
            raise ValueError("masked_lm logits need explicit masked positions")
        positions = range(limit)
    positions = np.asarray(list(positions), dtype=np.int64)
    if positions.size and (positions.min() < 0 or positions.max() >= limit):
        raise ValueError(f"LM position out of range [0, {limit})")
    if positions.size == 0:
        return np.zeros((0, config.vocab_size))
    return hidden[positions] @ params["lm.w"] + params["lm.b"]
