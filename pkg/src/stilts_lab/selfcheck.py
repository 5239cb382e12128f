"""Self-tests behind ``stilts-lab check``: finite-difference gradient checks
for every op and for the whole encoder, and metric oracles written from the
definitions rather than from :mod:`metrics`."""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import metrics as M
from .autodiff import Graph, grad_check
from .encoder import EncoderConfig, EncoderGraph, init_params, new_head, param_count

OP_TOLERANCE = 1e-7
ENCODER_TOLERANCE = 1e-5
METRIC_TOLERANCE = 1e-10


def _projected(g: Graph, node: int, rng: np.random.Generator) -> int:
    # a random linear functional turns any output into a scalar loss
    r = rng.normal(size=g.value(node).shape)
    return g.sum(g.multiply(node, g.const(r)))


def op_cases() -> Dict[str, Tuple[Callable, Dict[str, np.ndarray]]]:
    """op name -> (build, params) suitable for :func:`grad_check`."""
    rng = np.random.default_rng(1234)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    r_seed = 99

    def unary(fn, value):
        def build(p):
            g = Graph()
            a = g.param("x", p["x"])
            return g, _projected(g, fn(g, a), np.random.default_rng(r_seed))
        return build, {"x": value}

    def binary(fn, a_val, b_val):
        def build(p):
            g = Graph()
            a, b = g.param("a", p["a"]), g.param("b", p["b"])
            return g, _projected(g, fn(g, a, b), np.random.default_rng(r_seed))
        return build, {"a": a_val, "b": b_val}

    keep = (rng.random((3, 4)) > 0.3) / 0.7
    fill = rng.random((3, 4)) > 0.6
    ids = np.array([[0, 2, 2], [4, 1, 3]])
    targets = np.array([1, 0, 3])
    # inputs to max are kept apart so the argmax is stable under the step
    spread = np.arange(12, dtype=float).reshape(3, 4)[:, rng.permutation(4)] + 0.1 * x

    cases = {
        "add": binary(lambda g, a, b: g.add(a, b), x, y[:1]),
        "sub": binary(lambda g, a, b: g.sub(a, b), x, y),
        "multiply": binary(lambda g, a, b: g.multiply(a, b), x, y),
        "matmul": binary(lambda g, a, b: g.matmul(a, b), rng.normal(size=(2, 3, 4)), w),
        "scale": unary(lambda g, a: g.scale(a, -1.7), x),
        "abs": unary(lambda g, a: g.abs(a), x + np.sign(x)),
        "tanh": unary(lambda g, a: g.tanh(a), x),
        "gelu": unary(lambda g, a: g.gelu(a), 2 * x),
        "softmax": unary(lambda g, a: g.softmax(a), x),
        "dropout": unary(lambda g, a: g.dropout(a, keep), x),
        "masked_fill": unary(lambda g, a: g.softmax(g.masked_fill(a, fill)), x),
        "transpose": unary(lambda g, a: g.transpose(a, (1, 0)), x),
        "reshape": unary(lambda g, a: g.reshape(a, (2, 6)), x),
        "slice": unary(lambda g, a: g.slice(a, (slice(None), [0, 2, 2])), x),
        "concat": binary(lambda g, a, b: g.concat([a, b]), x, y[:, :2]),
        "sum": unary(lambda g, a: g.sum(a, axis=0), x),
        "mean": unary(lambda g, a: g.mean(a), x),
        "max": unary(lambda g, a: g.max(a, axis=1), spread),
        "embedding": unary(lambda g, a: g.embedding(a, ids), rng.normal(size=(5, 3))),
        "cross_entropy": unary(lambda g, a: g.cross_entropy(a, targets), x),
        "mse": binary(lambda g, a, b: g.mse(a, b), x, y),
    }

    def ln_build(p):
        g = Graph()
        out = g.layer_norm(g.param("x", p["x"]), g.param("gain", p["gain"]), g.param("bias", p["bias"]))
        return g, _projected(g, out, np.random.default_rng(r_seed))

    cases["layer_norm"] = (ln_build, {"x": x, "gain": 1 + 0.1 * rng.normal(size=4), "bias": rng.normal(size=4)})
    return cases


def check_ops() -> Dict[str, float]:
    return {name: grad_check(build, params) for name, (build, params) in op_cases().items()}


CHECK_CONFIG = dict(vocab_size=12, max_len=8, d_model=8, n_heads=2, n_layers=2, dropout_rate=0.0)


def encoder_case(pooling: str = "cls_token", objective_style: str = "masked_lm", seed: int = 0,
                 jitter: float = 0.3):
    """(build, params, config) for the full encoder with a classification head
    and an LM loss.  ``jitter`` moves weights away from the near-symmetric
    initialisation so that every path carries gradient."""
    config = EncoderConfig(pooling=pooling, objective_style=objective_style, **CHECK_CONFIG)
    rng = np.random.default_rng(seed)
    params = {k: v + jitter * rng.normal(size=v.shape) for k, v in init_params(config, seed).items()}
    head = new_head("classification", 3, config.pooled_dim, rng)
    params.update(head.params())
    ids = rng.integers(5, config.vocab_size, size=(3, 6))
    mask = np.ones((3, 6), dtype=bool)
    mask[1, 4:] = False
    mask[2, 5:] = False
    labels = np.array([0, 2, 1])
    rows, cols = np.array([0, 1, 2]), np.array([1, 2, 3])

    def build(p):
        g = Graph()
        eg = EncoderGraph(g, {k: v for k, v in p.items() if not k.startswith("head.")}, config)
        h = eg.encode(ids, mask)
        if pooling == "cls_token":
            z = eg.pool_first(h)
        elif pooling == "last_token":
            z = eg.pool_last(h, mask)
        else:
            hb = eg.encode(ids[::-1], mask[::-1])
            z = eg.siamese(eg.pool_max_project(h, mask), eg.pool_max_project(hb, mask[::-1]))
        out = g.add(g.matmul(z, g.param("head.w", p["head.w"])), g.param("head.b", p["head.b"]))
        task = g.cross_entropy(out, labels)
        lm = g.cross_entropy(eg.lm_logits(h, rows, cols), ids[rows, cols + 1 if config.causal else cols])
        return g, g.add(task, lm)

    return build, params, config


def check_encoder() -> Dict[str, Tuple[int, float]]:
    out = {}
    for pooling, style in (("cls_token", "masked_lm"), ("last_token", "causal_lm"), ("siamese_pair", "masked_lm")):
        build, params, config = encoder_case(pooling, style)
        out[f"{pooling}/{style}"] = (param_count(config) + params["head.w"].size + params["head.b"].size,
                                     grad_check(build, params))
    return out


# metric oracles, written from the textbook formulas


def oracle_confusion(preds, golds):
    tp = fp = fn = tn = 0
    for p, y in zip(preds, golds):
        if p == 1 and y == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def oracle_matthews(preds, golds) -> float:
    tp, fp, fn, tn = oracle_confusion(preds, golds)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return 0.0 if den == 0 else 100.0 * (tp * tn - fp * fn) / math.sqrt(den)


def oracle_f1(preds, golds) -> float:
    tp, fp, fn, _ = oracle_confusion(preds, golds)
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def oracle_ranks(x) -> List[float]:
    # rank of each value = mean of the 1-based positions it would occupy
    xs = sorted(x)
    out = []
    for v in x:
        positions = [i + 1 for i, u in enumerate(xs) if u == v]
        out.append(sum(positions) / len(positions))
    return out


def oracle_pearson(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return 100.0 * sxy / math.sqrt(sxx * syy)


def oracle_spearman(x, y) -> float:
    return oracle_pearson(oracle_ranks(x), oracle_ranks(y))


def metric_cases(n: int = 100, seed: int = 0):
    """Random binary label pairs and real-valued pairs, including ties,
    constant predictions and tiny sizes."""
    rng = np.random.default_rng(seed)
    binary, real = [], []
    for i in range(n):
        size = int(rng.integers(1, 30)) if i % 10 else 2
        golds = rng.integers(0, 2, size=size)
        if i % 7 == 0:
            preds = np.full(size, int(rng.integers(2)))
        else:
            preds = rng.integers(0, 2, size=size)
        binary.append((preds.tolist(), golds.tolist()))
        size = int(rng.integers(2, 30))
        while True:
            x = rng.integers(0, 6, size=size).astype(float) if i % 2 else rng.normal(size=size)
            y = rng.integers(0, 6, size=size).astype(float) if i % 3 == 0 else rng.normal(size=size)
            if np.ptp(x) > 0 and np.ptp(y) > 0:
                break
        real.append((x.tolist(), y.tolist()))
    return binary, real


def check_metrics(n: int = 100, seed: int = 0) -> Dict[str, float]:
    binary, real = metric_cases(n, seed)
    worst = {"matthews": 0.0, "f1": 0.0, "pearson": 0.0, "spearman": 0.0}
    for preds, golds in binary:
        worst["matthews"] = max(worst["matthews"], abs(M.matthews(preds, golds) - oracle_matthews(preds, golds)))
        worst["f1"] = max(worst["f1"], abs(M.f1_binary(preds, golds) - oracle_f1(preds, golds)))
    for x, y in real:
        worst["pearson"] = max(worst["pearson"], abs(M.pearson(x, y) - oracle_pearson(x, y)))
        worst["spearman"] = max(worst["spearman"], abs(M.spearman(x, y) - oracle_spearman(x, y)))
    return worst


def run_checks() -> Tuple[bool, List[str]]:
    ok = True
    lines = []
    ops = check_ops()
    worst_op = max(ops, key=ops.get)
    ok &= ops[worst_op] < OP_TOLERANCE
    lines.append(f"ops: {len(ops)} checked, max relative error {ops[worst_op]:.2e} ({worst_op})")
    for name, (count, err) in check_encoder().items():
        ok &= err < ENCODER_TOLERANCE
        lines.append(f"encoder {name}: {count} params, max relative error {err:.2e}")
    for name, err in check_metrics().items():
        ok &= err < METRIC_TOLERANCE
        lines.append(f"metric {name}: max deviation from oracle {err:.2e}")
    lines.append("all checks passed" if ok else "CHECK FAILED")
    return bool(ok), lines
