"""Dense float tensors with define-by-run reverse-mode differentiation.

Every op builds a node that remembers its parents and a backward rule. The
graph is rebuilt on each forward pass and walked once in reverse
topological order by :func:`backward`.

Values are float32 by default. ``precision(np.float64)`` switches newly
created tensors to float64, which the gradient checks use as a tighter
test mode.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Create tensors with ``dtype`` inside the block."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class ShapeError(ValueError):
    pass


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")


class Tensor:
    """A value in the computation graph.

    ``data`` is a contiguous row-major ndarray. ``grad`` holds the
    gradient of the last backward root with respect to this tensor, or
    ``None`` when the tensor was not reached.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _contiguous(np.asarray(data, dtype=default_dtype()))
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _const(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None):
        return reduce_max(self, axis)


class Parameter(Tensor):
    """A trainable leaf. ``lr_scale`` multiplies the optimizer's rate."""

    __slots__ = ("name", "lr_scale")

    def __init__(self, data, name: str = "", lr_scale: float = 1.0):
        # own the storage: optimizers update it in place
        super().__init__(np.array(data, dtype=default_dtype()), requires_grad=True)
        self.name = name
        self.lr_scale = lr_scale

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would turn a 0-d array into shape (1,)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _const(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t.op = "const"
    t._parents = ()
    t._backward = None
    return t


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return _const(np.asarray(x, dtype=dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    """Wrap an op result. ``backward_fn(g)`` returns one gradient (or None) per parent."""
    out = _const(_contiguous(np.asarray(data)))
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Populate ``grad`` on every node reachable from ``root``.

    Leaf gradients accumulate across calls (call ``zero_grad`` between
    steps); intermediate gradients are recomputed each call. A non-scalar
    root needs an explicit ``seed`` of its own shape.
    """
    if seed is None:
        if root.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
        seed = np.ones_like(root.data)
    elif seed.shape != root.shape:
        raise _shape_error("backward seed", seed.shape, root.shape)
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.dtype)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            node.grad = g
        else:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_pair(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return None
    if b.size == 1 or a.size == 1:
        return "b" if b.size == 1 else "a"
    raise _shape_error(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, like: Tensor, scalar: bool) -> np.ndarray:
    if scalar:
        return np.asarray(g.sum(), dtype=like.dtype).reshape(like.shape)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    bc = _broadcast_pair("add", a, b)
    return make_node(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a, bc == "a"), _unbroadcast(g, b, bc == "b")),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    bc = _broadcast_pair("sub", a, b)
    return make_node(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a, bc == "a"), _unbroadcast(-g, b, bc == "b")),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    bc = _broadcast_pair("mul", a, b)
    return make_node(
        a.data * b.data, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.data, a, bc == "a"), _unbroadcast(g * a.data, b, bc == "b")),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    bc = _broadcast_pair("div", a, b)
    out = a.data / b.data
    return make_node(
        out, (a, b), "div",
        lambda g: (_unbroadcast(g / b.data, a, bc == "a"), _unbroadcast(-g * out / b.data, b, bc == "b")),
    )


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), "neg", lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * a.dtype.type(c), (a,), "scale", lambda g: (g * a.dtype.type(c),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_node(out, (a,), "sigmoid", lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return make_node(a.data @ b.data, (a, b), "matmul", lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return make_node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return make_node(a.data[idx], (a,), "getitem", bw)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise _shape_error("concat", ref, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_node(
        np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat",
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out, dtype=a.dtype), (a,), "sum", bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis, keepdims), 1.0 / n)


def reduce_max(a: Tensor, axis: int | None = None) -> Tensor:
    """Max with the subgradient routed to the first maximal element."""
    if axis is None:
        flat = a.data.reshape(-1)
        i = int(np.argmax(flat))

        def bw(g):
            out = np.zeros(a.size, dtype=a.dtype)
            out[i] = g.reshape(-1)[0]
            return (out.reshape(a.shape),)

        return make_node(np.asarray(flat[i]), (a,), "max", bw)
    ax = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, ax)

    def bw_axis(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), ax)
        return (full,)

    return make_node(np.squeeze(out, ax), (a,), "max", bw_axis)


def stack_scalars(values: Iterable[Tensor]) -> Tensor:
    return concat([v.reshape(1) for v in values], axis=0)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[..., Tensor], inputs: Sequence, step: float = 1e-3,
               oracle_dtype=np.float64, max_elements: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative gap between backprop and central differences.

    The error per element is ``|a - n| / max(1e-8, |a| + |n|)``. The
    analytic side runs in the working precision; the difference quotient
    is evaluated in ``oracle_dtype`` (float64 by default, since float32
    differences lose small gradient entries entirely; pass ``None`` to use
    the working precision). ``max_elements`` limits each input to a random
    subset of coordinates.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = [np.array(x.data if isinstance(x, Tensor) else x, dtype=default_dtype()) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in base]
    out = f(*leaves)
    backward(out)
    odt = np.dtype(oracle_dtype or default_dtype()).type
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with precision(odt), no_grad():
        probe = [x.astype(odt) for x in base]
        for leaf, x in zip(leaves, probe):
            analytic = np.zeros(x.shape) if leaf.grad is None else leaf.grad.astype(np.float64)
            coords = np.arange(x.size)
            if max_elements is not None and x.size > max_elements:
                coords = rng.choice(x.size, size=max_elements, replace=False)
            flat = x.reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                fp = float(f(*[Tensor(p) for p in probe]).data.sum())
                flat[c] = orig - step
                fm = float(f(*[Tensor(p) for p in probe]).data.sum())
                flat[c] = orig
                num = (fp - fm) / (2 * step)
                a = analytic.reshape(-1)[c]
                worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
