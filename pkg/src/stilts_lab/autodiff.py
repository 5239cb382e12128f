"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` records every op as it is evaluated.  Ops return integer
node ids; ``graph.value(i)`` gives the array.  ``graph.backward(loss)``
walks the tape in reverse and returns gradients for parameter nodes.

Also here: Adam with bias correction, the warmup/linear-decay schedule,
and a central-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
MASK_VALUE = -1e30


class ShapeError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Graph:
    """An append-only op tape.

    Node ids are positions in the tape, so inputs always precede the nodes
    that consume them.
    """

    def __init__(self) -> None:
        self.values: List[np.ndarray] = []
        self.kinds: List[str] = []
        self.inputs: List[Tuple[int, ...]] = []
        self._vjps: List[Optional[Callable]] = []
        self.params: Dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.values)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def _push(self, kind: str, value, inputs: Tuple[int, ...] = (), vjp=None) -> int:
        self.values.append(np.asarray(value, dtype=np.float64))
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self._vjps.append(vjp)
        return len(self.values) - 1

    # leaves

    def param(self, name: str, value: np.ndarray) -> int:
        node = self._push("param", value)
        self.params[node] = name
        return node

    def const(self, value) -> int:
        return self._push("const", value)

    def forward(self, op: str, *inputs, **kwargs) -> int:
        """Dispatch an op by name, e.g. ``g.forward("softmax", x)``."""
        method = getattr(self, op.replace("-", "_"), None)
        if method is None or op.startswith("_") or op in ("param", "const", "backward"):
            raise ValueError(f"unknown op {op!r}")
        return method(*inputs, **kwargs)

    # elementwise

    def add(self, a: int, b: int) -> int:
        x, y = self.values[a], self.values[b]
        _broadcast("add", x, y)
        return self._push("add", x + y, (a, b),
                          lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))

    def sub(self, a: int, b: int) -> int:
        x, y = self.values[a], self.values[b]
        _broadcast("sub", x, y)
        return self._push("sub", x - y, (a, b),
                          lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))

    def multiply(self, a: int, b: int) -> int:
        x, y = self.values[a], self.values[b]
        _broadcast("multiply", x, y)
        return self._push("multiply", x * y, (a, b),
                          lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    def scale(self, a: int, c: float) -> int:
        c = float(c)
        return self._push("scale", self.values[a] * c, (a,), lambda g: (g * c,))

    def abs(self, a: int) -> int:
        x = self.values[a]
        return self._push("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))

    def tanh(self, a: int) -> int:
        y = np.tanh(self.values[a])
        return self._push("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))

    def gelu(self, a: int) -> int:
        # tanh approximation, as used by BERT and GPT
        x = self.values[a]
        t = np.tanh(GELU_C * (x + 0.044715 * x * x * x))
        y = 0.5 * x * (1.0 + t)

        def vjp(g):
            dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

        return self._push("gelu", y, (a,), vjp)

    def dropout(self, a: int, mask: np.ndarray) -> int:
        """Multiply by a caller-supplied mask (already scaled by 1/keep)."""
        x = self.values[a]
        mask = np.asarray(mask, dtype=np.float64)
        _broadcast("dropout", x, mask)
        return self._push("dropout", x * mask, (a,), lambda g: (_unbroadcast(g * mask, x.shape),))

    def masked_fill(self, a: int, mask: np.ndarray, value: float = MASK_VALUE) -> int:
        x = self.values[a]
        mask = np.asarray(mask, dtype=bool)
        _broadcast("masked_fill", x, mask)
        y = np.where(mask, value, x)
        return self._push("masked_fill", y, (a,),
                          lambda g: (_unbroadcast(np.where(mask, 0.0, g), x.shape),))

    # linear algebra and shape

    def matmul(self, a: int, b: int) -> int:
        x, y = self.values[a], self.values[b]
        if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
        try:
            np.broadcast_shapes(x.shape[:-2], y.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}") from None

        def vjp(g):
            gx = g @ np.swapaxes(y, -1, -2)
            if y.ndim == 2:
                # weight matrix shared across leading dims: fold them into one GEMM
                gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gy = np.swapaxes(x, -1, -2) @ g
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return self._push("matmul", x @ y, (a, b), vjp)

    def transpose(self, a: int, axes: Sequence[int]) -> int:
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        return self._push("transpose", np.transpose(self.values[a], axes), (a,),
                          lambda g: (np.transpose(g, inverse),))

    def reshape(self, a: int, shape: Sequence[int]) -> int:
        x = self.values[a]
        try:
            y = x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
        return self._push("reshape", y, (a,), lambda g: (g.reshape(x.shape),))

    def slice(self, a: int, key) -> int:
        x = self.values[a]

        def vjp(g):
            out = np.zeros_like(x)
            np.add.at(out, key, g)
            return (out,)

        return self._push("slice", x[key], (a,), vjp)

    def concat(self, nodes: Sequence[int]) -> int:
        xs = [self.values[n] for n in nodes]
        lead = xs[0].shape[:-1]
        for x in xs[1:]:
            if x.shape[:-1] != lead:
                raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape}")
        splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return self._push("concat", np.concatenate(xs, axis=-1), tuple(nodes),
                          lambda g: tuple(np.split(g, splits, axis=-1)))

    def embedding(self, table: int, ids: np.ndarray) -> int:
        w = self.values[table]
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= w.shape[0]):
            raise ShapeError(f"embedding: ids outside [0, {w.shape[0]}) for table {w.shape}")

        def vjp(g):
            out = np.zeros_like(w)
            np.add.at(out, ids.reshape(-1), g.reshape(-1, w.shape[1]))
            return (out,)

        return self._push("embedding", w[ids], (table,), vjp)

    # reductions and normalisation

    def sum(self, a: int, axis: Optional[int] = None) -> int:
        x = self.values[a]
        if axis is None:
            return self._push("sum", x.sum(), (a,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
        return self._push("sum", x.sum(axis=axis), (a,),
                          lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))

    def mean(self, a: int) -> int:
        x = self.values[a]
        n = x.size
        return self._push("mean", x.mean(), (a,), lambda g: (np.full(x.shape, g / n),))

    def max(self, a: int, axis: int) -> int:
        x = self.values[a]
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        y = np.take_along_axis(x, idx, axis=axis)

        def vjp(g):
            out = np.zeros_like(x)
            np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
            return (out,)

        return self._push("max", np.squeeze(y, axis=axis), (a,), vjp)

    def softmax(self, a: int) -> int:
        x = self.values[a]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        return self._push("softmax", y, (a,),
                          lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))

    def layer_norm(self, a: int, gain: int, bias: int, eps: float = 1e-5) -> int:
        x, w, b = self.values[a], self.values[gain], self.values[bias]
        if w.shape != x.shape[-1:] or b.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: incompatible shapes {x.shape} and {w.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * rstd

        def vjp(g):
            dxhat = g * w
            dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            lead = tuple(range(x.ndim - 1))
            return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

        return self._push("layer_norm", xhat * w + b, (a, gain, bias), vjp)

    # losses

    def cross_entropy(self, logits: int, targets: np.ndarray) -> int:
        """Mean negative log-likelihood of integer ``targets`` under row softmax."""
        z = self.values[logits]
        t = np.asarray(targets, dtype=np.int64)
        if z.ndim != 2 or t.shape != (z.shape[0],):
            raise ShapeError(f"cross_entropy: incompatible shapes {z.shape} and {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
            raise ShapeError(f"cross_entropy: targets outside [0, {z.shape[1]})")
        n = z.shape[0]
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(n)
        loss = -logp[rows, t].mean()

        def vjp(g):
            p = np.exp(logp)
            p[rows, t] -= 1.0
            return (p * (g / n),)

        return self._push("cross_entropy", loss, (logits,), vjp)

    def mse(self, a: int, b: int) -> int:
        x, y = self.values[a], self.values[b]
        if x.shape != y.shape:
            raise ShapeError(f"mse: incompatible shapes {x.shape} and {y.shape}")
        d = x - y
        n = max(d.size, 1)
        return self._push("mse", (d * d).mean(), (a, b),
                          lambda g: (2.0 * g * d / n, -2.0 * g * d / n))

    # reverse pass

    def backward(self, loss: int) -> Dict[int, np.ndarray]:
        """Gradients of scalar node ``loss`` keyed by parameter node id."""
        if self.values[loss].shape != ():
            raise ShapeError(f"backward: loss must be scalar, got shape {self.values[loss].shape}")
        grads: Dict[int, np.ndarray] = {loss: np.ones(())}
        for node in range(loss, -1, -1):
            g = grads.get(node)
            vjp = self._vjps[node]
            if g is None or vjp is None:
                continue
            for src, gi in zip(self.inputs[node], vjp(g)):
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        out = {}
        for node in self.params:
            g = grads.get(node)
            out[node] = np.zeros_like(self.values[node]) if g is None else np.asarray(g, dtype=np.float64)
        return out

    def named_grads(self, grads: Mapping[int, np.ndarray]) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for node, name in self.params.items():
            out[name] = out[name] + grads[node] if name in out else grads[node]
        return out


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Returns a new parameter dict; ``state`` is updated in place and also
    returned.  Parameters without a gradient entry are left alone.
    """
    for name, g in grads.items():
        if name not in state.m:
            raise KeyError(f"adam_step: no optimizer slot for parameter {name!r}")
        if g.shape != state.m[name].shape or g.shape != params[name].shape:
            raise ShapeError(f"adam_step: incompatible shapes {params[name].shape} and {g.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {name!r} at step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = dict(params)
    for name, g in grads.items():
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        out[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup to ``base_lr`` then linear decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("lr_schedule: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"lr_schedule: step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_fraction < 1:
        raise ValueError(f"lr_schedule: warmup_fraction {warmup_fraction} outside [0, 1)")
    warmup = warmup_fraction * total_steps
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


# Central differences in float64 carry roundoff of roughly eps * |loss| / step,
# about 1e-10 at step 1e-5; below this magnitude gradients are compared
# absolutely, so noise contributes at most ~1e-6 to the relative error while
# any analytic error above ~1e-9 still registers.
GRAD_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(build: Callable[[Mapping[str, np.ndarray]], Tuple[Graph, int]],
               params: Mapping[str, np.ndarray], step: float = 1e-5,
               floor: float = GRAD_FLOOR) -> float:
    """Compare ``Graph.backward`` against central finite differences.

    ``build(params)`` must construct a fresh graph from the given parameter
    dict and return ``(graph, loss_node)``.  Every coordinate of every
    parameter is perturbed.  Returns the max relative error (0 when there
    are no parameters).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if not params or all(p.size == 0 for p in params.values()):
        return 0.0
    g, loss = build(params)
    analytic = g.named_grads(g.backward(loss))
    worst = 0.0
    for name, p in params.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            gp, lp = build(params)
            up = float(gp.value(lp))
            flat[i] = orig - step
            gm, lm = build(params)
            down = float(gm.value(lm))
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        a = analytic.get(name, np.zeros_like(p))
        worst = max(worst, relative_error(a, numeric, floor))
    return worst


def params_finite(params: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(p)) for p in params)
