"""Dense tensors with reverse-mode differentiation and a seeded random source.

Graphs are built define-by-run: every op applied to a tensor that requires
gradients records its parents and a backward rule. Backward rules are written
with the same tensor ops, so a gradient computed with ``create_graph=True`` can
itself be differentiated (needed by the R1 penalty).
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[["Tensor"], Tuple[Optional["Tensor"], ...]]

NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2

_node_ids = itertools.count()
_grad_enabled = True
_default_dtype = np.dtype(np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, left: Tuple[int, ...], right: Tuple[int, ...]):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class GradError(RuntimeError):
    """Raised on invalid differentiation requests."""


# ----------------------------
# Global modes
# ----------------------------

@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextmanager
def _grad_mode(enabled: bool) -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = previous


@contextmanager
def default_dtype(dtype: Union[str, np.dtype, type]) -> Iterator[None]:
    """Set the precision of newly created tensors (float64 or float32)."""
    global _default_dtype
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"Unsupported dtype '{resolved}'. Use float64 or float32.")
    previous = _default_dtype
    _default_dtype = resolved
    try:
        yield
    finally:
        _default_dtype = previous


def get_default_dtype() -> np.dtype:
    return _default_dtype


# ----------------------------
# Tensor
# ----------------------------

class Tensor:
    """N-dimensional float array taking part in a differentiation graph."""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op: Optional[str] = None

    # shape helpers
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype or _default_dtype)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ----------------------------
# Primitive ops
# ----------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def _backward(g: Tensor):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), _backward, "add")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    if isinstance(a, Tensor) and np.isscalar(b):
        return affine(a, float(b), 0.0)
    if isinstance(b, Tensor) and np.isscalar(a):
        return affine(b, float(a), 0.0)
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def _backward(g: Tensor):
        return (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                sum_to(mul(g, a), b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), _backward, "mul")


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """Scalar affine map ``scale * a + shift``."""
    a = as_tensor(a)

    def _backward(g: Tensor):
        return (affine(g, scale, 0.0),)

    return _make(a.data * a.dtype.type(scale) + a.dtype.type(shift), (a,), _backward, "affine")


def neg(a: Tensor) -> Tensor:
    return affine(a, -1.0, 0.0)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def _backward(g: Tensor):
        return (mul(g, affine(power(a, exponent - 1.0), exponent, 0.0)),)

    return _make(np.power(a.data, a.dtype.type(exponent)), (a,), _backward, "pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def _backward(g: Tensor):
        return (matmul(g, transpose(b)) if a.requires_grad else None,
                matmul(transpose(a), g) if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), _backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, ())

    def _backward(g: Tensor):
        return (transpose(g),)

    return _make(a.data.T, (a,), _backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def _backward(g: Tensor):
        return (reshape(g, a.shape),)

    return _make(data, (a,), _backward, "reshape")


def _sum_to_array(arr: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = arr.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and arr.shape[i + lead] != 1
    )
    return arr.sum(axis=axes, keepdims=True).reshape(shape) if axes else arr.reshape(shape)


def sum_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum broadcast axes away so the result has ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def _backward(g: Tensor):
        return (broadcast_to(g, a.shape),)

    return _make(_sum_to_array(a.data, shape), (a,), _backward, "sum_to")


def broadcast_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None

    def _backward(g: Tensor):
        return (sum_to(g, a.shape),)

    return _make(data, (a,), _backward, "broadcast_to")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    kept_shape = np.sum(a.data, axis=axis, keepdims=True).shape

    def _backward(g: Tensor):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size // max(1, np.sum(a.data, axis=axis, keepdims=True).size) if a.size else 1
    return affine(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1), 0.0)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    if axis not in (-1, tensors[0].ndim - 1):
        raise ValueError("concat only supports the last axis")
    tensors = [as_tensor(t) for t in tensors]
    head = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != head:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def _backward(g: Tensor):
        return tuple(
            getitem(g, (Ellipsis, slice(int(lo), int(hi)))) if t.requires_grad else None
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), _backward, "concat")


def getitem(a: Tensor, index) -> Tensor:
    def _backward(g: Tensor):
        return (_scatter(g, index, a.shape),)

    return _make(np.asarray(a.data[index]), (a,), _backward, "slice")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    return getitem(a, (Ellipsis, slice(start, stop)))


def _scatter(g: Tensor, index, shape: Tuple[int, ...]) -> Tensor:
    data = np.zeros(shape, dtype=g.dtype)
    np.add.at(data, index, g.data)

    def _backward(gg: Tensor):
        return (getitem(gg, index),)

    return _make(data, (g,), _backward, "scatter")


def exp(a: Tensor) -> Tensor:
    def _backward(g: Tensor):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), _backward, "exp")
    return out


def log(a: Tensor) -> Tensor:
    def _backward(g: Tensor):
        return (mul(g, power(a, -1.0)),)

    return _make(np.log(a.data), (a,), _backward, "log")


def tanh(a: Tensor) -> Tensor:
    def _backward(g: Tensor):
        return (mul(g, affine(mul(out, out), -1.0, 1.0)),)

    out = _make(np.tanh(a.data), (a,), _backward, "tanh")
    return out


def sigmoid(a: Tensor) -> Tensor:
    def _backward(g: Tensor):
        return (mul(g, mul(out, affine(out, -1.0, 1.0))),)

    out = _make(expit(a.data), (a,), _backward, "sigmoid")
    return out


def softplus(a: Tensor) -> Tensor:
    """Numerically stable ``log(1 + exp(a))``."""
    def _backward(g: Tensor):
        return (mul(g, sigmoid(a)),)

    return _make(np.logaddexp(0.0, a.data).astype(a.dtype, copy=False), (a,), _backward, "softplus")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = np.where(a.data > 0, 1.0, slope).astype(a.dtype)

    def _backward(g: Tensor):
        return (mul(g, Tensor(mask, dtype=mask.dtype)),)

    return _make(a.data * mask, (a,), _backward, "leaky_relu")


# ----------------------------
# Composite ops
# ----------------------------

def square(a: Tensor) -> Tensor:
    return power(a, 2.0)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def swish(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


def group_norm(
    x: Tensor,
    groups: int = 1,
    scale: Optional[ArrayLike] = None,
    shift: Optional[ArrayLike] = None,
    eps: float = NORM_EPS,
) -> Tensor:
    """Normalize feature groups of a (batch, features) tensor, then scale and shift.

    ``groups=1`` is plain feature (layer) normalization. ``scale`` and ``shift``
    may be learnable parameters of shape (features,) or per-row modulations of
    shape (batch, features) predicted from a latent code.
    """
    if x.ndim != 2 or x.shape[1] % groups:
        raise ShapeError("group_norm", x.shape, (groups,))
    batch, features = x.shape
    h = reshape(x, (batch, groups, features // groups))
    centered = h - mean(h, axis=-1, keepdims=True)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    out = reshape(mul(centered, power(affine(var, 1.0, eps), -0.5)), (batch, features))
    if scale is not None:
        out = mul(out, scale)
    if shift is not None:
        out = add(out, shift)
    return out


def minibatch_stddev(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Append the batch-averaged feature standard deviation as an extra column."""
    centered = x - mean(x, axis=0, keepdims=True)
    std = sqrt(affine(mean(mul(centered, centered), axis=0, keepdims=True), 1.0, eps))
    stat = mean(std, axis=1, keepdims=True)
    return concat([x, broadcast_to(stat, (x.shape[0], 1))])


# ----------------------------
# Differentiation
# ----------------------------

def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            # parents are always created before children, so the graph is acyclic
            assert parent.node_id < node.node_id, "cyclic tape"
            if parent.requires_grad and parent.node_id not in visited:
                stack.append((parent, False))
    return order


def _backprop(output: Tensor, seed: Tensor, create_graph: bool) -> Tuple[List[Tensor], Dict[int, Tensor]]:
    order = _topological(output)
    grads: Dict[int, Tensor] = {output.node_id: seed}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(node.node_id)
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                previous = grads.get(parent.node_id)
                grads[parent.node_id] = pg if previous is None else add(previous, pg)
    return order, grads


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Optional[Tensor] = None,
    create_graph: bool = False,
) -> List[Tensor]:
    """Return d(output)/d(input) for each input without touching ``.grad``.

    A non-scalar output needs ``grad_output`` (the vector in the vector-Jacobian
    product). With ``create_graph`` the returned tensors stay on the graph.
    """
    if grad_output is None:
        if output.size != 1:
            raise GradError(f"grad needs grad_output for non-scalar output of shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape, dtype=output.dtype))
    if not output.requires_grad:
        return [Tensor(np.zeros(x.shape, dtype=x.dtype)) for x in inputs]
    _, grads = _backprop(output, grad_output, create_graph)
    return [grads.get(x.node_id, Tensor(np.zeros(x.shape, dtype=x.dtype))) for x in inputs]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, grads = _backprop(loss, Tensor(np.ones(loss.shape, dtype=loss.dtype)), create_graph=False)
    for node in order:
        if node.is_leaf and node.node_id in grads:
            g = np.array(grads[node.node_id].data, dtype=node.dtype).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative deviation between backward() and central differences."""
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
    zero_grad(inputs)
    backward(fn(*inputs))
    analytic = [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]
    worst_diff, scale = 0.0, 1e-12
    for x, a in zip(inputs, analytic):
        numeric = np.zeros(x.shape)
        flat = x.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                up = fn(*inputs).item()
                flat[i] = original - h
                down = fn(*inputs).item()
                flat[i] = original
                numeric.reshape(-1)[i] = (up - down) / (2 * h)
        worst_diff = max(worst_diff, float(np.max(np.abs(a - numeric), initial=0.0)))
        scale = max(scale, float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    zero_grad(inputs)
    return worst_diff / scale


# ----------------------------
# Random numbers
# ----------------------------

class Rng:
    """Seeded PCG64 stream; child streams are split with SeedSequence spawn keys."""

    def __init__(self, seed: int = 0, spawn_key: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(sequence))
        self.draws = 0

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "Rng":
        return cls(seed, spawn_key=tuple(keys))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.spawn_key + tuple(keys))

    def normal(self, shape: Union[int, Sequence[int]]) -> np.ndarray:
        out = self._gen.standard_normal(shape, dtype=np.float64)
        self.draws += out.size
        return out.astype(_default_dtype, copy=False)

    def uniform(self, low: float, high: float, shape: Union[int, Sequence[int]]) -> np.ndarray:
        out = self._gen.uniform(low, high, size=shape)
        self.draws += out.size
        return out.astype(_default_dtype, copy=False)

    def integers(self, low: int, high: int, size: Union[int, Sequence[int]]) -> np.ndarray:
        out = self._gen.integers(low, high, size=size)
        self.draws += np.size(out)
        return out

    def choice(self, n: int, size: int, p: Optional[np.ndarray] = None) -> np.ndarray:
        out = self._gen.choice(n, size=size, p=p)
        self.draws += np.size(out)
        return out

    def state(self) -> dict:
        return {
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "draws": self.draws,
            "bit_generator": self._gen.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state.get("spawn_key", ())))
        rng._gen.bit_generator.state = state["bit_generator"]
        rng.draws = int(state.get("draws", 0))
        return rng


def sample_normal(rng: Rng, shape: Union[int, Sequence[int]]) -> Tensor:
    """I.i.d. standard normal tensor, detached from any graph."""
    return Tensor(rng.normal(shape))
