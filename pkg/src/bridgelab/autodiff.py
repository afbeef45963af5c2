"""Define-by-run reverse-mode automatic differentiation on float64 arrays.

Every operation on :class:`Tensor` records its parents and a closure mapping
the output gradient to parent gradients. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates into ``.grad`` of
leaf tensors that require gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tc

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = tc.check_finite(np.array(data, dtype=tc.DTYPE), name or "tensor")
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """Populate ``.grad`` of every leaf reachable from this scalar."""
        if self.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                grads[pid] = pg if pid not in grads else grads[pid] + pg

    # operator sugar
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str = "op") -> Tensor:
    """Wrap an op result, recording ``backward(g) -> grads per parent`` when needed."""
    out = Tensor.__new__(Tensor)
    out.data = tc.check_finite(np.asarray(data, dtype=tc.DTYPE), name)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.name = name
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` inputs below it are clamped (zero gradient there)."""
    a = as_tensor(a)
    if floor > 0:
        x = np.maximum(a.data, floor)
        return make(np.log(x), (a,), lambda g: (np.where(a.data >= floor, g / x, 0.0),), "log")
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def maximum(a, floor: float) -> Tensor:
    """Clamp from below by a constant; gradient passes only where ``a > floor``."""
    a = as_tensor(a)
    return make(np.maximum(a.data, floor), (a,), lambda g: (np.where(a.data > floor, g, 0.0),), "maximum")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return make(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


def selu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg_part = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    out = SELU_SCALE * np.where(x > 0, x, neg_part)
    slope = SELU_SCALE * np.where(x > 0, 1.0, neg_part + SELU_ALPHA)
    return make(out, (a,), lambda g: (g * slope,), "selu")


# ---------------------------------------------------------------- reductions and shapes


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make(out, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make(a.data[idx], (a,), backward, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# ---------------------------------------------------------------- linear algebra / conv / pooling


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = tc.matmul(a.data, b.data)
    return make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    _validate_conv(x.data, w.data, stride, padding)
    out, cols = tc.conv2d_im2col(x.data, w.data, stride, padding)
    f, c, kh, kw = w.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = tc.col2im(g2 @ w.data.reshape(f, -1), x.shape, kh, kw, stride, padding) if x.requires_grad else None
        return gx, gw

    return make(out, (x, w), backward, "conv2d")


def _validate_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and filters, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, filters {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if w.shape[2] > x.shape[2] + 2 * padding or w.shape[3] > x.shape[3] + 2 * padding:
        raise ValueError("kernel larger than padded input")


def max_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    out, idx = tc.max_pool2d_argmax(x.data, k)

    def backward(g):
        n, c, ho, wo = g.shape
        win = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
        win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        full = np.zeros_like(x.data)
        full[:, :, : ho * k, : wo * k] = win
        return (full,)

    return make(out, (x,), backward, "max_pool2d")


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    out = tc.avg_pool2d(x.data, k)

    def backward(g):
        n, c, ho, wo = g.shape
        full = np.zeros_like(x.data)
        full[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (full,)

    return make(out, (x,), backward, "avg_pool2d")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    p = tc.softmax(a.data, axis)
    return make(p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = tc.log_softmax(a.data, axis)
    p = np.exp(out)
    return make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------- verification


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    epsilon: float = 1e-5,
    *,
    kink_slope_tol: float | None = 1e-3,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between autodiff and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values on every
    call. Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.

    An element whose one-sided slopes disagree by more than
    ``kink_slope_tol * max(1, |n|)`` is treated as straddling a kink
    (ReLU at 0, max-pool tie) and skipped; pass ``None`` to check everything.
    ``max_per_param`` checks a random subset of each parameter's entries.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    items = list(params.items()) if isinstance(params, Mapping) else [(str(i), p) for i, p in enumerate(params)]
    for _, p in items:
        p.zero_grad()
    loss = loss_fn()
    f0 = loss.item()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in items}

    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        indices = range(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            indices = sorted((rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = _eval_loss(loss_fn)
            flat[i] = orig - epsilon
            fm = _eval_loss(loss_fn)
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            if kink_slope_tol is not None:
                jump = abs((fp - f0) - (f0 - fm)) / epsilon
                if jump > kink_slope_tol * max(1.0, abs(num)):
                    continue
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def _eval_loss(loss_fn) -> float:
    with no_grad():
        value = loss_fn().item()
    if not np.isfinite(value):
        raise tc.NonFiniteError("loss is non-finite at a perturbed point")
    return value
