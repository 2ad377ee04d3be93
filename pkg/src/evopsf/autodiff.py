"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every :class:`Tensor` is also a node of the computation graph: it keeps its
value, references to the nodes it was computed from, and a closure that
pushes the upstream gradient back to those parents. Only scalar-times-tensor
broadcasting is supported; everything else must agree in shape.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called with inputs violating its precondition."""


class GradStateError(RuntimeError):
    """backward() was called on a graph whose gradients were not reset."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array value that records how it was computed.

    Leaves created by the user hold ``requires_grad=True`` when they are
    trainable parameters. Non-leaf tensors require grad iff any parent does.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "op", "_backward", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), op: str = "leaf"):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = parents
        self.op = op
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


# every Tensor carries its parents and local backward rule, so it is also the graph node
GraphNode = Tensor


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data, parents=parents, op=op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _accumulate(node: Tensor, grads: dict, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    key = id(node)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_elementwise(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting allowed)")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if _is_scalar(like) and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "add")

    def bw(g, grads):
        _accumulate(a, grads, _reduce_to(g, a))
        _accumulate(b, grads, _reduce_to(g, b))

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "sub")

    def bw(g, grads):
        _accumulate(a, grads, _reduce_to(g, a))
        _accumulate(b, grads, _reduce_to(-g, b))

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "mul")

    def bw(g, grads):
        _accumulate(a, grads, _reduce_to(g * b.data, a))
        _accumulate(b, grads, _reduce_to(g * a.data, b))

    return _node(a.data * b.data, (a, b), "mul", bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g, grads):
        _accumulate(x, grads, g * (1.0 - y * y))

    return _node(y, (x,), "tanh", bw)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g, grads):
        _accumulate(x, grads, g * y * (1.0 - y))

    return _node(y, (x,), "sigmoid", bw)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""

    def bw(g, grads):
        _accumulate(x, grads, g * np.sign(x.data))

    return _node(np.abs(x.data), (x,), "abs", bw)


def square(x: Tensor) -> Tensor:
    def bw(g, grads):
        _accumulate(x, grads, 2.0 * g * x.data)

    return _node(x.data * x.data, (x,), "square", bw)


# linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g, grads):
        _accumulate(a, grads, g @ b.data.T)
        _accumulate(b, grads, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-wise bias: ``x[n, d] + bias[d]``."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {bias.shape} to {x.shape}")

    def bw(g, grads):
        _accumulate(x, grads, g)
        _accumulate(bias, grads, g.sum(axis=0))

    return _node(x.data + bias.data, (x, bias), "add_bias", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add_bias(matmul(x, weight), bias)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {x.shape}")

    def bw(g, grads):
        _accumulate(x, grads, g.T)

    return _node(x.data.T.copy(), (x,), "transpose", bw)


# shape manipulation ----------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def bw(g, grads):
        _accumulate(x, grads, g.reshape(x.shape))

    return _node(y.copy(), (x,), "reshape", bw)


def concatenate(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise DimensionError("concatenate: no inputs")
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: incompatible shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g, grads):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(p, grads, piece)

    return _node(y, tuple(parts), "concatenate", bw)


def take(x: Tensor, index) -> Tensor:
    """numpy-style indexing; fancy indices accumulate on repeats."""
    y = x.data[index]

    def bw(g, grads):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, grads, full)

    return _node(np.array(y, dtype=np.float64), (x,), "take", bw)


def cumsum(x: Tensor, axis: int) -> Tensor:
    def bw(g, grads):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        _accumulate(x, grads, rev)

    return _node(np.cumsum(x.data, axis=axis), (x,), "cumsum", bw)


# reductions ------------------------------------------------------------


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    y = x.data.sum(axis=axis)

    def bw(g, grads):
        if axis is None:
            _accumulate(x, grads, np.broadcast_to(g, x.shape).copy())
        else:
            _accumulate(x, grads, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _node(np.asarray(y), (x,), "sum", bw)


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean: empty input")
    return mul(tsum(x), 1.0 / x.size)


# probability -----------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Stabilized softmax over a vector."""
    if x.data.ndim != 1 or x.shape[0] == 0:
        raise DimensionError(f"softmax: expected a non-empty vector, got {x.shape}")
    z = x.data - x.data.max()
    e = np.exp(z)
    y = e / e.sum()

    def bw(g, grads):
        _accumulate(x, grads, y * (g - np.dot(g, y)))

    return _node(y, (x,), "softmax", bw)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of a matrix; masked-out entries get weight 0.

    A row with no admissible entry yields all zeros.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    elif mask.shape != x.shape:
        raise DimensionError(f"softmax_rows: mask {mask.shape} vs input {x.shape}")
    filled = np.where(mask, x.data, -np.inf)
    row_max = filled.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data - row_max, 0.0)), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bw(g, grads):
        inner = (g * y).sum(axis=1, keepdims=True)
        _accumulate(x, grads, y * (g - inner))

    return _node(y, (x,), "softmax_rows", bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows: expected a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g, grads):
        _accumulate(x, grads, g - p * g.sum(axis=1, keepdims=True))

    return _node(y, (x,), "log_softmax_rows", bw)


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy in nats of a probability vector.

    Zero-probability terms contribute 0 and receive zero gradient.
    """
    if p.data.ndim != 1 or p.shape[0] == 0:
        raise DimensionError(f"entropy: expected a non-empty vector, got {p.shape}")
    if np.any(p.data < 0) or abs(p.data.sum() - 1.0) > 1e-9:
        raise ContractError(f"entropy: input is not a probability vector (sum={p.data.sum()!r})")
    pos = p.data > 0
    logp = np.where(pos, np.log(np.where(pos, p.data, 1.0)), 0.0)
    h = -np.sum(p.data * logp)

    def bw(g, grads):
        _accumulate(p, grads, np.where(pos, -g * (logp + 1.0), 0.0))

    return _node(np.asarray(h), (p,), "entropy", bw)


# losses ----------------------------------------------------------------


def l1_distance(a: Tensor, b) -> Tensor:
    """|a0 - b0| + |a1 - b1| with ``b`` treated as a constant."""
    target = b.data if isinstance(b, Tensor) else _as_array(b)
    if a.shape != (2,) or target.shape != (2,):
        raise DimensionError(f"l1_distance: expected two length-2 vectors, got {a.shape} and {target.shape}")
    return tsum(absolute(sub(a, Tensor(target))))


def mse(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else _as_array(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    return mean(square(sub(pred, Tensor(target))))


def binary_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean BCE of sigmoid(logits) against {0,1} targets, computed stably."""
    t = target.data if isinstance(target, Tensor) else _as_array(target)
    if logits.shape != t.shape:
        raise DimensionError(f"binary_cross_entropy: logits {logits.shape} vs target {t.shape}")
    if logits.size == 0:
        raise DimensionError("binary_cross_entropy: empty input")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g, grads):
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        _accumulate(logits, grads, g * (s - t) / n)

    return _node(np.asarray(per.mean()), (logits,), "bce", bw)


# attention -------------------------------------------------------------


def attention(query: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None = None):
    """Single-head scaled dot-product attention.

    Returns the attended outputs and a detached copy of the post-softmax
    weights, which callers may inspect without creating a gradient path.
    """
    if query.data.ndim != 2 or keys.data.ndim != 2 or values.data.ndim != 2:
        raise DimensionError(f"attention: expected matrices, got {query.shape}, {keys.shape}, {values.shape}")
    if query.shape[1] != keys.shape[1] or keys.shape[0] != values.shape[0]:
        raise DimensionError(f"attention: query {query.shape}, keys {keys.shape}, values {values.shape} misaligned")
    d = query.shape[1]
    scores = mul(matmul(query, transpose(keys)), 1.0 / math.sqrt(d))
    weights = softmax_rows(scores, mask)
    return matmul(weights, values), weights.data.copy()


# backward and optimisation ---------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every node of the graph that requires grad.

    Raises:
        ContractError: if ``loss`` is not a single element.
        GradStateError: if the graph was already differentiated or a leaf
            still carries a gradient from an earlier call.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GradStateError("backward: graph already differentiated; call zero_grads and rebuild")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topological(loss)
    for node in order:
        if not node.parents and node.grad is not None:
            raise GradStateError("backward: parameter gradients not reset; call zero_grads first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._backward is not None:
            node._backward(g, grads)
    loss._consumed = True


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Vanilla gradient step ``p <- p - lr * grad`` in place."""
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


# checkpoints -----------------------------------------------------------


def dumps_tensors(tensors: Mapping[str, Tensor | np.ndarray]) -> str:
    payload = {}
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        payload[name] = {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def loads_tensors(text: str) -> dict[str, np.ndarray]:
    raw = json.loads(text)
    out = {}
    for name, entry in raw.items():
        arr = np.array(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise DimensionError(f"checkpoint entry {name!r}: {arr.size} values for shape {shape}")
        out[name] = arr.reshape(shape)
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).write_text(dumps_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_text())
