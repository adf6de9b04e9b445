"""Minimal reverse-mode differentiation over numpy arrays.

Graphs are recorded eagerly (define-by-run): every op on a :class:`Tensor`
that requires grad remembers its parents and a closure that maps the
upstream gradient onto them. :func:`backward` walks the tape in reverse
topological order.

Also provides a tiny ``Module`` container, SGD-momentum / Adam with
decoupled weight decay, and a flat binary checkpoint format.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# grad mode is per thread, so a worker inside no_grad cannot switch off
# recording for the learner thread
_MODE = threading.local()


class ShapeError(ValueError):
    """Incompatible operand shapes; the message names the op."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or inf."""


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _MODE.enabled = False
    try:
        yield
    finally:
        _MODE.enabled = prev


def grad_enabled() -> bool:
    return getattr(_MODE, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _result_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _result_shape("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _result_shape("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _result_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _result_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: _accum(x, -g), "neg")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: _accum(x, g * (out > 0)), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * (1 - out * out)), "tanh")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _make(softplus_np(x.data), (x,), lambda g: _accum(x, g * sigmoid_np(x.data)), "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * out), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: _accum(x, 2 * g * x.data), "square")


def stop_gradient(x) -> Tensor:
    """Identity in the forward pass; no gradient flows to ``x``."""
    x = as_tensor(x)
    out = Tensor(x.data)
    out.op = "stop_gradient"
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(out), (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: _accum(x, g.reshape(x.shape)), "reshape")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out, ts, bw, "concat")


def index(x, idx) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _make(x.data[idx], (x,), bw, "index")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make(table.data[ids], (table,), bw, "embedding")


def take_last(x, ids) -> Tensor:
    """Pick ``x[..., ids]`` per row: ``x`` is (n, A), ``ids`` is (n,)."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or ids.shape != (x.shape[0],):
        raise ShapeError(f"take_last: shapes {x.shape} and {ids.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, ids] = g
        _accum(x, full)

    return _make(x.data[rows, ids], (x,), bw, "take_last")


# ---------------------------------------------------------------------------
# normalization and softmax family


def _normalize(x: Tensor, axis: int, eps: float, op: str) -> Tensor:
    xd = x.data
    n = xd.shape[axis]
    x64 = xd.astype(np.float64)
    centred = x64 - np.add.reduce(x64, axis=axis, keepdims=True) / n
    var = np.add.reduce(centred * centred, axis=axis, keepdims=True) / n
    inv64 = 1.0 / np.sqrt(var + eps)
    xhat = (centred * inv64).astype(xd.dtype)
    inv = inv64.astype(xd.dtype)

    def bw(g):
        gm = np.mean(g, axis=axis, keepdims=True)
        gxm = np.mean(g * xhat, axis=axis, keepdims=True)
        _accum(x, inv * (g - gm - xhat * gxm))

    return _make(xhat, (x,), bw, op)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    return _normalize(as_tensor(x), -1, eps, "layer_norm")


def batch_norm(x, running_mean=None, running_var=None, training: bool = True, eps: float = 1e-5) -> Tensor:
    """Normalize over the batch axis.

    In training mode batch statistics are used and differentiated through.
    Otherwise the supplied running statistics act as constants.
    """
    x = as_tensor(x)
    if training:
        if x.shape[0] < 2:
            raise ShapeError(f"batch_norm: training mode needs batch >= 2, got {x.shape}")
        return _normalize(x, 0, eps, "batch_norm")
    if running_mean is None or running_var is None:
        raise ValueError("batch_norm: inference mode requires running statistics")
    inv = (1.0 / np.sqrt(np.asarray(running_var) + eps)).astype(x.dtype)
    mu = np.asarray(running_mean, dtype=x.dtype)
    return _make(((x.data - mu) * inv).astype(x.dtype), (x,), lambda g: _accum(x, g * inv), "batch_norm")


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    out = softmax_np(x.data)

    def bw(g):
        _accum(x, out * (g - np.sum(g * out, axis=-1, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    out = log_softmax_np(x.data)

    def bw(g):
        p = np.exp(out)
        _accum(x, g - p * np.sum(g, axis=-1, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Row-wise cosine similarity along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True, dtype=np.float64)).astype(a.dtype)
    nb = np.sqrt(np.sum(b.data * b.data, axis=-1, keepdims=True, dtype=np.float64)).astype(b.dtype)
    na = np.maximum(na, eps)
    nb = np.maximum(nb, eps)
    ua, ub = a.data / na, b.data / nb
    cos = np.sum(ua * ub, axis=-1, dtype=np.float64).astype(a.dtype)

    def bw(g):
        g = g[..., None]
        c = cos[..., None]
        if a.requires_grad:
            _accum(a, g * (ub - c * ua) / na)
        if b.requires_grad:
            _accum(b, g * (ua - c * ub) / nb)

    return _make(cos, (a, b), bw, "cosine_similarity")


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every tensor reachable from scalar ``output``.

    When ``params`` is given their grads are reset to zero first, so
    parameters that do not influence ``output`` end with an all-zero grad.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if not output.requires_grad:
        return
    order = _topo(output)
    for node in order:
        if node._backward is not None:
            node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior grads are not needed after propagation
            node.grad = None if node is not output else node.grad


# ---------------------------------------------------------------------------
# modules


class Module:
    """Parameter container. Subclasses assign Tensors / Modules as attributes.

    Non-learnable state (running statistics) lives in numpy arrays whose
    attribute names are listed in ``buffer_names``.
    """

    buffer_names: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self.buffer_names:
            yield f"{prefix}{key}", getattr(self, key)
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out["buffer:" + name] = np.array(b, copy=True)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = [k for k in params if k not in state]
        if missing:
            raise KeyError(f"missing parameters in state: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"load_state_dict: {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, _ in list(self.named_buffers()):
            key = "buffer:" + name
            if key in state:
                owner = self
                *path, attr = name.split(".")
                for part in path:
                    owner = owner[int(part)] if isinstance(owner, (list, tuple)) else getattr(owner, part)
                setattr(owner, attr, np.array(state[key], copy=True))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (used for float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        state = {"buffer:" + k: np.asarray(v).astype(dtype) for k, v in self.named_buffers()}
        if state:
            self.load_state_dict({**{k: p.data for k, p in self.named_parameters()}, **state})
        return self


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        bound = 1.0 / math.sqrt(n_in)
        if zero_init:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = parameter(w)
        self.bias = parameter(b)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return add(mul(layer_norm(x, self.eps), self.gain), self.shift)


class BatchNorm(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(dim, dtype=DEFAULT_DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.training = False

    def __call__(self, x: Tensor) -> Tensor:
        use_batch = self.training and x.shape[0] > 1
        if use_batch:
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * x.data.mean(axis=0)).astype(DEFAULT_DTYPE)
            self.running_var = ((1 - m) * self.running_var + m * x.data.var(axis=0)).astype(DEFAULT_DTYPE)
        h = batch_norm(x, self.running_mean, self.running_var, training=use_batch, eps=self.eps)
        return add(mul(h, self.gain), self.shift)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 3e-4
    weight_decay: float = 2e-5
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"optimizer kind must be 'adam' or 'sgd-momentum', got {self.kind!r}")
        # lr == 0 is accepted so a frozen optimizer can be expressed
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def sgd_full_scale(cls) -> "OptimizerConfig":
        return cls(kind="sgd-momentum", learning_rate=0.2, weight_decay=1e-4, momentum=0.9)

    def to_dict(self) -> dict:
        return asdict(self)


def optimizer_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    config: OptimizerConfig,
    step: int,
    state: list[dict] | None = None,
) -> tuple[list[np.ndarray], list[dict]]:
    """Pure update rule. ``step`` counts from 1. Returns (new_params, new_state).

    Weight decay is decoupled: ``p <- p - lr * (update + wd * p)``.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; optimizer step aborted")
    if state is None:
        state = [{} for _ in params]
    grads = list(grads)
    if config.max_grad_norm is not None:
        total = math.sqrt(float(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads])))
        if total > config.max_grad_norm:
            scale = config.max_grad_norm / (total + 1e-12)
            grads = [g * scale for g in grads]
    lr, wd = config.learning_rate, config.weight_decay
    new_params, new_state = [], []
    for p, g, st in zip(params, grads, state):
        if config.kind == "sgd-momentum":
            buf = st.get("momentum_buffer")
            buf = g.copy() if buf is None else config.momentum * buf + g
            upd = buf
            st = {"momentum_buffer": buf}
        else:
            m = st.get("exp_avg", np.zeros_like(p))
            v = st.get("exp_avg_sq", np.zeros_like(p))
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            mhat = m / (1 - config.beta1**step)
            vhat = v / (1 - config.beta2**step)
            upd = mhat / (np.sqrt(vhat) + config.eps)
            st = {"exp_avg": m, "exp_avg_sq": v}
        new_params.append((p - lr * (upd + wd * p)).astype(p.dtype))
        new_state.append(st)
    return new_params, new_state


class Optimizer:
    """Stateful wrapper over :func:`optimizer_step` for a fixed parameter list."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], config: OptimizerConfig):
        self.named_params = list(named_params)
        self.config = config
        self.step_count = 0
        self.state: list[dict] = [{} for _ in self.named_params]

    def step(self) -> None:
        params = [p for _, p in self.named_params]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        new, state = optimizer_step([p.data for p in params], grads, self.config, self.step_count + 1, self.state)
        for p, arr in zip(params, new):
            p.data = arr
        self.state = state
        self.step_count += 1

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"optim:step_count": np.array(self.step_count, dtype=np.int64)}
        for (name, _), st in zip(self.named_params, self.state):
            for key, arr in st.items():
                out[f"optim:{name}:{key}"] = arr
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(np.asarray(state["optim:step_count"]).item())
        self.state = []
        for name, _ in self.named_params:
            prefix = f"optim:{name}:"
            self.state.append({k[len(prefix):]: np.array(v) for k, v in state.items() if k.startswith(prefix)})


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"EZV2CKPT"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | raw little-endian data``."""
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": 1, "tensors": entries, "meta": meta or {}}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16 : 16 + hlen])
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(buf[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, header["meta"]


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` with respect to ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise; the floor stops tiny
    gradients from dominating through round-off."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``build`` maps leaf tensors (float64, requiring grad) to a scalar output.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build(leaves)
    backward(out, leaves)
    worst = 0.0
    for leaf in leaves:
        def f() -> float:
            with no_grad():
                return float(build(leaves).data)

        num = numeric_grad(f, leaf.data, h)
        worst = max(worst, relative_error(leaf.grad, num))
    return worst
