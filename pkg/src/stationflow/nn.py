"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery for the models in this package: affine maps,
ReLU/LeakyReLU/sigmoid, row-masked softmax, embedding lookup, reductions,
Adam with L2-in-gradient weight decay, min-max scaling and a central
finite-difference gradient checker. Each op builds a node whose backward
closure accumulates into its parents; `Tensor.backward()` walks the graph
in reverse topological order.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .common import ConfigError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)
    out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))
    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(-_unbroadcast(g, b.shape))
    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))
    out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > 0.0))
    out._backward = backward
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.where(a.data > 0.0, a.data, slope * a.data), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * np.where(a.data > 0.0, 1.0, slope))
    out._backward = backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, parents=(a,))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s * (1.0 - s))
    out._backward = backward
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))
    out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])
    out._backward = backward
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup (embedding-style); the gradient scatter-adds by index."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], parents=(a,))

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a.accumulate(acc)
    out._backward = backward
    return out


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(ge, a.shape).copy())
    out._backward = backward
    return out


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data ** 2, parents=(a,))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * 2.0 * a.data)
    out._backward = backward
    return out


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over entries where mask==1; masked entries get 0.

    Rows with no valid entry produce an all-zero row (callers treat that
    as "no neighbors": the aggregated vector is zero).
    """
    scores = _as_tensor(scores)
    mask = np.asarray(mask, dtype=np.float64)
    neg = np.where(mask > 0.0, scores.data, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(np.where(mask > 0.0, scores.data - rowmax, -np.inf))
    e = np.where(mask > 0.0, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    p = e / safe
    out = Tensor(p, parents=(scores,))

    def backward(g):
        if scores.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            scores.accumulate(p * (g - dot))
    out._backward = backward
    return out


def softmax(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a non-empty 1-D array."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("softmax of an empty sequence")
    e = np.exp(v - v.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# Parameters and optimization

class Params:
    """Ordered name -> Tensor map for every learnable array of a model."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._store:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._store.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._store.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self._store.items():
            t.data = np.array(state[k], dtype=np.float64).reshape(t.shape)


def affine_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def embedding_init(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.uniform(-0.05, 0.05, size=shape)


class Adam:
    """Adam with bias correction; weight decay enters the gradient (L2)."""

    def __init__(self, params: Params, lr: float = 0.002, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Scaling

class MinMaxScaler:
    """Column-wise min-max map fitted on training rows only.

    Constant columns transform to 0 (mask recorded); no clipping, so test
    rows can land outside [0, 1].
    """

    def __init__(self, mins: np.ndarray, maxs: np.ndarray):
        self.mins = np.asarray(mins, dtype=np.float64)
        self.maxs = np.asarray(maxs, dtype=np.float64)
        self.constant = self.maxs == self.mins
        span = self.maxs - self.mins
        self._span = np.where(self.constant, 1.0, span)

    @classmethod
    def fit(cls, X: np.ndarray) -> "MinMaxScaler":
        X = np.asarray(X, dtype=np.float64)
        if X.size == 0:
            raise ConfigError("cannot fit a scaler on an empty matrix")
        if X.ndim == 1:
            X = X[:, None]
        return cls(X.min(axis=0), X.max(axis=0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[:, None]
        out = (X - self.mins) / self._span
        out[:, self.constant] = 0.0
        return out[:, 0] if squeeze else out

    def inverse_transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[:, None]
        out = X * self._span + self.mins
        out[:, self.constant] = self.mins[self.constant]
        return out[:, 0] if squeeze else out

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxScaler":
        return cls(np.array(d["mins"]), np.array(d["maxs"]))


# ---------------------------------------------------------------------------
# Verification and persistence

def gradient_check(build_loss: Callable[[], Tensor], params: Params,
                   h: float = 1e-5, rtol: float = 1e-4,
                   atol: float = 1e-7) -> list[tuple[str, int, float, float]]:
    """Central finite differences against analytic gradients.

    Returns the failures as (name, flat_index, analytic, numeric); an empty
    list means every entry agreed within rtol/atol.
    """
    params.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}
    failures = []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            if abs(a - numeric) > atol + rtol * max(abs(a), abs(numeric)):
                failures.append((name, i, float(a), float(numeric)))
    return failures


def save_checkpoint(path: Path | str, params_state: dict[str, np.ndarray],
                    meta: dict) -> None:
    """JSON checkpoint: parameter names, shapes, row-major values, metadata.

    Floats serialize via repr and round-trip bit-exactly.
    """
    doc = {
        "meta": meta,
        "params": {
            name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
            for name, arr in params_state.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    state = {
        name: np.array(spec["values"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in doc["params"].items()
    }
    return state, doc["meta"]
