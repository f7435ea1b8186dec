"""Reverse-mode automatic differentiation over dense float64 tensors

Tensors are recorded as they are computed (define-by-run). Every operation
stores its parents and a vector-Jacobian product; ``backward`` walks the
recorded graph in reverse topological order and accumulates gradients into
every leaf that requires them, while ``grad`` returns gradients for chosen
inputs without touching any accumulator.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from amopt.core.errors import GraphError, NumericalError, ShapeError

LAYER_NORM_EPS = 1e-5
LEAKY_RELU_SLOPE = 0.01

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
Vjp = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool) -> Iterator[None]:
    previous = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    """Context in which operations are evaluated without recording a graph"""
    return _grad_mode(False)


def enable_grad():
    """Re-enable recording inside a ``no_grad`` block"""
    return _grad_mode(True)


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient"""

    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_vjp")
    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._vjp: Optional[Vjp] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad}{label})"


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], vjp: Vjp, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise binary operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _record(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def vjp(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _record(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def vjp(g, needs):
        return (
            _unbroadcast(g / b.data, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None,
        )

    return _record(out, (a, b), vjp, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record(-x.data, (x,), lambda g, needs: (-g,), "neg")


def convex_combine(weight, x, y) -> Tensor:
    """weight * x + (1 - weight) * y, kept inside [min(x, y), max(x, y)]

    The result is clipped to the interval spanned by ``x`` and ``y`` so the
    convexity of the combination survives floating-point rounding; the clip
    moves values by at most one ulp and is treated as identity for gradients.
    """
    weight, x, y = as_tensor(weight), as_tensor(x), as_tensor(y)
    _broadcast_check("convex_combine", weight, x)
    _broadcast_check("convex_combine", x, y)
    w = weight.data
    raw = w * x.data + (1.0 - w) * y.data
    out = np.clip(raw, np.minimum(x.data, y.data), np.maximum(x.data, y.data))

    def vjp(g, needs):
        return (
            _unbroadcast(g * (x.data - y.data), weight.shape) if needs[0] else None,
            _unbroadcast(g * w, x.shape) if needs[1] else None,
            _unbroadcast(g * (1.0 - w), y.shape) if needs[2] else None,
        )

    return _record(out, (weight, x, y), vjp, "convex_combine")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(x, w) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {x.shape} by {w.shape}")

    def vjp(g, needs):
        return (
            g @ w.data.T if needs[0] else None,
            x.data.T @ g if needs[1] else None,
        )

    return _record(x.data @ w.data, (x, w), vjp, "matmul")


def affine(x, w, b) -> Tensor:
    """x @ w + b for a batch of row vectors"""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("affine", f"cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError("affine", f"bias shape {b.shape} does not match output width {w.shape[1]}")

    def vjp(g, needs):
        return (
            g @ w.data.T if needs[0] else None,
            x.data.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _record(x.data @ w.data + b.data, (x, w, b), vjp, "affine")


# ---------------------------------------------------------------------------
# Elementwise unary operations
# ---------------------------------------------------------------------------


def _unary(x, value: np.ndarray, local_grad: Callable[[], np.ndarray], op: str) -> Tensor:
    x = as_tensor(x)
    return _record(value, (x,), lambda g, needs: (g * local_grad(),), op)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _unary(x, out, lambda: 1.0 - out * out, "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(np.float64), "relu")


def leaky_relu(x, slope: float = LEAKY_RELU_SLOPE) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.data > 0, x.data, slope * x.data)
    return _unary(x, out, lambda: np.where(x.data > 0, 1.0, slope), "leaky_relu")


def elu(x) -> Tensor:
    x = as_tensor(x)
    negative = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, negative)
    return _unary(x, out, lambda: np.where(x.data > 0, 1.0, negative + 1.0), "elu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _unary(x, out, lambda: out * (1.0 - out), "sigmoid")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _unary(x, out, lambda: 0.5 * (1.0 + np.tanh(0.5 * x.data)), "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda: out, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data, "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data * x.data, lambda: 2.0 * x.data, "square")


def sqrt(x) -> Tensor:
    """Square root with a zero subgradient at 0"""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def local():
        safe = np.where(out > 0, out, 1.0)
        return np.where(out > 0, 0.5 / safe, 0.0)

    return _unary(x, out, local, "sqrt")


def clamp(x, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    x = as_tensor(x)
    lo = -np.inf if low is None else low
    hi = np.inf if high is None else high
    out = np.clip(x.data, lo, hi)
    return _unary(x, out, lambda: ((x.data >= lo) & (x.data <= hi)).astype(np.float64), "clamp")


# ---------------------------------------------------------------------------
# Reductions and shape plumbing
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _record(np.asarray(out), (x,), lambda g, needs: (_expand_reduced(g, x.shape, axis, keepdims),), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size / max(np.asarray(out).size, 1)

    def vjp(g, needs):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return _record(np.asarray(out), (x,), vjp, "mean")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError("concat", f"incompatible shapes {shapes} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g, needs):
        pieces = np.split(g, sizes, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _record(out, tensors, vjp, "concat")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record(out, (x,), lambda g, needs: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def vjp(g, needs):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out), (x,), vjp, "getitem")


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no gain or bias)"""
    x = as_tensor(x)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def vjp(g, needs):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * normed).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - normed * gx_mean),)

    return _record(normed, (x,), vjp, "layer_norm")


def detach(x) -> Tensor:
    """Value-equal tensor through which no gradient flows"""
    x = as_tensor(x)
    out = Tensor(x.data.copy())
    out.op = "detach"
    return out


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


class Graph:
    """Operations that produced a tensor, parents before children"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n._vjp is None]

    def propagate(self, output: Tensor, seed: np.ndarray, targets: Optional[set] = None) -> Dict[int, np.ndarray]:
        """Reverse sweep; with ``targets`` only paths reaching those ids are followed"""
        relevant = None
        if targets is not None:
            relevant = set()
            for node in self.nodes:
                if id(node) in targets or any(id(p) in relevant for p in node._parents):
                    relevant.add(id(node))

        grads: Dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            needs = tuple(
                p.requires_grad and (relevant is None or id(p) in relevant) for p in node._parents
            )
            if not any(needs):
                continue
            for parent, pg, need in zip(node._parents, node._vjp(g, needs), needs):
                if not need or pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
        return grads


def _check_output(output: Tensor) -> None:
    if output.is_leaf:
        raise GraphError("backward called on a leaf tensor; run a forward pass first")
    if output.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.shape}")


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every reachable leaf"""
    _check_output(output)
    if not output.requires_grad:
        return
    graph = Graph.trace(output)
    grads = graph.propagate(output, np.ones_like(output.data))
    for leaf in graph.leaves():
        g = grads.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(output: Tensor, inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of a scalar output w.r.t. ``inputs``; accumulators are untouched"""
    _check_output(output)
    if not output.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    graph = Graph.trace(output)
    grads = graph.propagate(output, np.ones_like(output.data), targets={id(t) for t in inputs})
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]


# ---------------------------------------------------------------------------
# Parameters and Adam
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameters with gradient accumulators and Adam moments"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: ArrayLike) -> Tensor:
        if name in self._params:
            raise GraphError(f"duplicate parameter name: {name}")
        param = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = param
        self._m[name] = np.zeros_like(param.data)
        self._v[name] = np.zeros_like(param.data)
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, values: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        unexpected = set(values) - set(self._params)
        if missing or unexpected:
            raise GraphError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in values.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self._params[name].shape:
                raise ShapeError("load_state_dict", f"{name}: {value.shape} != {self._params[name].shape}")
            self._params[name].data = value.copy()

    def copy_from(self, other: "ParamStore") -> None:
        self.load_state_dict(other.state_dict())

    def adam_step(self, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        adam_step(self, lr, betas, eps)


def adam_step(params: ParamStore, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update (descent on the accumulated gradients), then zero them"""
    beta1, beta2 = betas
    for name, param in params.items():
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            raise NumericalError(f"non-finite gradient for parameter {name}")

    params.step += 1
    t = params.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, param in params.items():
        g = param.grad if param.grad is not None else np.zeros_like(param.data)
        m = params._m[name] = beta1 * params._m[name] + (1.0 - beta1) * g
        v = params._v[name] = beta2 * params._v[name] + (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grad()


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    atol: float = 1e-7,
) -> float:
    """Largest relative error between analytic and central-difference gradients

    ``fn`` receives one Tensor per input and must return a scalar Tensor.
    Relative error is |a - n| / max(|a|, |n|, atol).
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    analytic = grad(fn(*leaves), leaves)

    worst = 0.0
    for i, x in enumerate(inputs):
        x = np.array(x, dtype=np.float64)
        flat = x.reshape(-1)
        for j in range(flat.size):
            shifted = []
            for sign in (1.0, -1.0):
                nudged = flat.copy()
                nudged[j] += sign * h
                args = [Tensor(np.array(v, dtype=np.float64)) for v in inputs]
                args[i] = Tensor(nudged.reshape(x.shape))
                with no_grad():
                    shifted.append(fn(*args).item())
            numeric = (shifted[0] - shifted[1]) / (2.0 * h)
            exact = analytic[i].reshape(-1)[j]
            scale = max(abs(exact), abs(numeric), atol)
            worst = max(worst, abs(exact - numeric) / scale)
    return worst
