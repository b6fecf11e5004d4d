"""Minimal reverse-mode autodiff over dense 2-D float64 matrices.

Everything the model computes (GRU cells, GAT layers, the two attention
levels, the decoders and the losses) is a composition of the closed primitive
set below.  Layout is row-major: a vector is a ``1 x n`` row and a batch of
vectors is stacked along the rows.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

PRIMITIVES = (
    "matmul",
    "add_broadcast_column",
    "mul",
    "add",
    "concat_rows",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "exp",
    "log",
    "row_softmax",
    "sum_columns",
    "mean_columns",
    "row_select",
    "scalar_mul",
)

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the operation graph (rollouts, evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A 2-D float64 matrix that remembers which primitive produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor data must be at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # operator sugar; every overload lowers to a primitive
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, scalar_mul(_as_tensor(other, self.shape), -1.0))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other, self.shape), scalar_mul(self, -1.0))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scalar_mul(self, -1.0)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _shape_error(kind: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, "matmul", (a, b), backward)


def add_broadcast_column(m: Tensor, v: Tensor) -> Tensor:
    """Add the ``1 x n`` row ``v`` to every row of the ``r x n`` matrix ``m``.

    This is the matrix-plus-vector addition of the attention equations written
    in row-major layout: the vector is broadcast down each column.
    """
    if v.shape[0] != 1 or v.shape[1] != m.shape[1]:
        raise _shape_error("add_broadcast_column", m, v)

    def backward(g):
        return g, g.sum(axis=0, keepdims=True)

    return _result(m.data + v.data, "add_broadcast_column", (m, v), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _result(ad * bd, "mul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("add", a, b)

    def backward(g):
        return g, g

    return _result(a.data + b.data, "add", (a, b), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices vertically (all parts share the column count)."""
    if not parts:
        raise ShapeError("concat_rows: no operands")
    cols = parts[0].shape[1]
    for p in parts[1:]:
        if p.shape[1] != cols:
            raise _shape_error("concat_rows", parts[0], p)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.vstack([p.data for p in parts]), "concat_rows", tuple(parts), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, "tanh", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _result(y, "sigmoid", (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    slopes = np.where(xd > 0.0, 1.0, slope)

    def backward(g):
        return (g * slopes,)

    return _result(xd * slopes, "leaky_relu", (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _result(y, "exp", (x,), backward)


def log(x: Tensor) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("log: non-finite input")
    if np.any(xd < 0.0):
        raise FloatingPointError("log: negative input")
    with np.errstate(divide="ignore"):
        y = np.log(xd)

    def backward(g):
        return (g / xd,)

    return _result(y, "log", (x,), backward)


def row_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, "row_softmax", (x,), backward)


def sum_columns(x: Tensor) -> Tensor:
    """Sum across the columns of each row: ``r x n -> r x 1``."""
    n = x.shape[1]

    def backward(g):
        return (np.repeat(g, n, axis=1),)

    return _result(x.data.sum(axis=1, keepdims=True), "sum_columns", (x,), backward)


def mean_columns(x: Tensor) -> Tensor:
    n = x.shape[1]

    def backward(g):
        return (np.repeat(g / n, n, axis=1),)

    return _result(x.data.mean(axis=1, keepdims=True), "mean_columns", (x,), backward)


def row_select(x: Tensor, index) -> Tensor:
    """Gather rows by integer index (embedding lookup); indices may repeat."""
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    rows = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ShapeError(f"row_select: index out of range for shape {x.shape}")

    def backward(g):
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], "row_select", (x,), backward)


def scalar_mul(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _result(x.data * s, "scalar_mul", (x,), backward)


_DISPATCH = {
    "matmul": lambda ops, attrs: matmul(*ops),
    "add_broadcast_column": lambda ops, attrs: add_broadcast_column(*ops),
    "mul": lambda ops, attrs: mul(*ops),
    "add": lambda ops, attrs: add(*ops),
    "concat_rows": lambda ops, attrs: concat_rows(ops),
    "tanh": lambda ops, attrs: tanh(*ops),
    "sigmoid": lambda ops, attrs: sigmoid(*ops),
    "leaky_relu": lambda ops, attrs: leaky_relu(*ops, slope=attrs.get("slope", 0.2)),
    "exp": lambda ops, attrs: exp(*ops),
    "log": lambda ops, attrs: log(*ops),
    "row_softmax": lambda ops, attrs: row_softmax(*ops),
    "sum_columns": lambda ops, attrs: sum_columns(*ops),
    "mean_columns": lambda ops, attrs: mean_columns(*ops),
    "row_select": lambda ops, attrs: row_select(*ops, attrs["index"]),
    "scalar_mul": lambda ops, attrs: scalar_mul(*ops, attrs["scalar"]),
}


def tensor_op(kind: str, operands: Sequence[Tensor], **attrs) -> Tensor:
    """Apply primitive ``kind`` by name."""
    if kind not in _DISPATCH:
        raise ValueError(f"unknown primitive {kind!r}")
    return _DISPATCH[kind](list(operands), attrs)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParameterStore | None" = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients add onto whatever ``grad`` already holds, so two calls without
    ``ParameterStore.zero_grad`` in between sum the two gradients.  When
    ``params`` is given the accumulated gradient of each parameter is returned
    by name; parameters the loss does not reach map to zeros.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return {}
    return params.gradients()


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterStore:
    """Ordered, uniquely named trainable matrices with seeded initialization."""

    def __init__(self, rng_seed: int = 0):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.rng_seed = rng_seed
        self._rng = np.random.default_rng(rng_seed)

    def add(self, name: str, rows: int, cols: int, init: str = "uniform", fan_in: int | None = None) -> Tensor:
        """Create a parameter.

        ``uniform`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in
        defaulting to ``rows`` (weights are stored input-major); ``zeros`` is
        used for biases.
        """
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if init == "zeros":
            data = np.zeros((rows, cols))
        elif init == "uniform":
            bound = 1.0 / np.sqrt(fan_in if fan_in is not None else rows)
            data = self._rng.uniform(-bound, bound, size=(rows, cols))
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.entries.items()
        }

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.entries.items())

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self.entries) - set(arrays)
        extra = set(arrays) - set(self.entries)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in self.entries.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def count(self) -> int:
        return int(sum(t.data.size for t in self.entries.values()))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParameterStore,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 0.003,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise KeyError(f"adam_step: no gradient for {missing}")
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam_step: optimizer state for {name} does not match {p.shape}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# verification


def grad_check(
    build: Callable[[], Tensor],
    params: ParameterStore,
    eps: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_per_param`` limits the check to that many coordinates per parameter
    (always including the coordinate with the largest analytic gradient);
    ``None`` checks every coordinate.
    """
    first = build().item()
    second = build().item()
    if first != second:
        raise GradCheckError(f"build is not deterministic: {first!r} != {second!r}")

    params.zero_grad()
    loss = build()
    analytic = backward(loss, params)
    rng = rng if rng is not None else np.random.default_rng(0)
    selected = list(names) if names is not None else list(params)

    worst = 0.0
    for name in selected:
        p = params[name]
        flat = p.data.reshape(-1)
        size = flat.size
        if max_per_param is None or size <= max_per_param:
            coords = np.arange(size)
        else:
            top = int(np.argmax(np.abs(analytic[name]).reshape(-1)))
            others = rng.choice(size, size=max_per_param - 1, replace=False)
            coords = np.unique(np.append(others, top))
        for k in coords:
            original = flat[k]
            flat[k] = original + eps
            up = build().item()
            flat[k] = original - eps
            down = build().item()
            flat[k] = original
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[name].reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
