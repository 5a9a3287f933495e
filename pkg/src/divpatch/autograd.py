"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable op builds a node that remembers its parents and a
closure mapping the output gradient to input gradients.  ``backward`` sorts
the reachable nodes topologically (a :class:`Tape`), replays the closures in
reverse order and then releases the graph, so a second ``backward`` over the
same graph is rejected.

Only the operations needed by the vision transformer and the diversity
losses are provided.  Tensors default to float32; anything mixed with a
float64 tensor is promoted by numpy, which is how the finite-difference
oracle evaluates functions in double precision.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Misuse of the gradient graph (non-scalar root, reused graph, ...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (stop-gradient)."""
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(x) -> Tensor:
    # sign(0) == 0 gives the zero subgradient at the kink
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_K = 0.044715


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    x2 = x.data * x.data
    u = _GELU_C * x.data * (1.0 + _GELU_K * x2)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(out, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # shared weight: fold the batch axes into one gemm
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    return scale(sum_(x, axis, keepdims), 1.0 / count)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def slice_(x, start: int, stop: int, axis: int = 0) -> Tensor:
    """``x[start:stop]`` along ``axis``; bounds are checked, not clipped."""
    x = as_tensor(x)
    size = x.shape[axis]
    if not (0 <= start <= stop <= size):
        raise IndexError(f"slice {start}:{stop} out of range for axis {axis} of size {size}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src, dtype=np.result_type(g.dtype, dtype))
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), bw, "slice")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def softmax(x, axis: int = -1, check_finite: bool = False) -> Tensor:
    x = as_tensor(x)
    if check_finite and not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax received non-finite input")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1, check_finite: bool = False) -> Tensor:
    x = as_tensor(x)
    if check_finite and not np.all(np.isfinite(x.data)):
        raise FloatingPointError("log_softmax received non-finite input")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``gain * x + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the operations reachable from a root.

    Each node appears after all of its inputs.  ``replay`` walks the record
    backwards exactly once, accumulating gradients additively over fan-out.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = self._toposort(root)
        self._replayed = False

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> None:
        if self._replayed:
            raise GraphError("tape already replayed")
        self._replayed = True
        grads: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        self.release()

    def release(self) -> None:
        for node in self.nodes:
            node._consumed = True
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node._op = "released"


def backward(root: Tensor) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``root``."""
    if root.data.size != 1 or root.ndim > 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GraphError("graph already consumed by a previous backward(); rebuild it")
    if not root.requires_grad:
        raise GraphError("root does not depend on any tensor that requires grad")
    tape = Tape(root)
    tape.replay()
    return tape


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x, eps: float = 1e-3, coords: Iterable[int] | None = None
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` is evaluated in float64.  The relative error of each coordinate is
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    base = np.array(as_tensor(x).data, dtype=np.float64)

    probe = [float(np.asarray(f(Tensor(base.copy())).data)) for _ in range(2)]
    if probe[0] != probe[1] and not (np.isnan(probe[0]) and np.isnan(probe[1])):
        raise GraphError("f is not deterministic; fix its random state")

    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad.astype(np.float64)

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = old - eps
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = old
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
