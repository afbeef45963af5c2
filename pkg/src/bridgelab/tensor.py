"""Dense float64 array primitives and a seeded random source.

Arrays are plain ``numpy.ndarray`` objects in float64. Every function here is
pure and raises :class:`NonFiniteError` instead of returning NaN/Inf.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf."""


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=DTYPE)


def ones(shape: Sequence[int]) -> np.ndarray:
    return np.ones(tuple(shape), dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul output")


def pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation (no kernel flip).

    Args:
        x: input of shape (N, C, H, W).
        w: filters of shape (F, C, kh, kw).

    Returns:
        Array of shape (N, F, H', W') with H' = (H + 2p - kh) // stride + 1.
    """
    x, w = as_array(x), as_array(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and filters, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input {c}, filters {cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    out, _ = conv2d_im2col(x, w, stride, padding)
    return check_finite(out, "conv2d output")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N*Ho*Wo, C*kh*kw) matrix of receptive fields, rows in (n, ho, wo) order."""
    n, c, h, w = x.shape
    if kh == kw == stride == 1 and padding == 0:
        return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    win = np.lib.stride_tricks.sliding_window_view(pad2d(x, padding), (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * ho : stride, : stride * wo : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add receptive fields back to an image."""
    n, c, h, w = x_shape
    if kh == kw == stride == 1 and padding == 0:
        return np.ascontiguousarray(cols.reshape(n, h, w, c).transpose(0, 3, 1, 2))
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[..., i, j]
    out = out.transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def conv2d_im2col(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    """Convolution output plus the im2col matrix (reused by the backward pass)."""
    n, _, h, wd = x.shape
    f, c, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = (cols @ w.reshape(f, c * kh * kw).T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def reduce_mean_var(x: np.ndarray, axes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and biased (population) variance over ``axes``, kept as size-1 dims."""
    x = as_array(x)
    axes = tuple(sorted({a % x.ndim for a in axes})) if x.ndim else ()
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if x.size == 0 or count == 0:
        raise ValueError("empty reduction")
    mean = x.mean(axis=axes, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    return check_finite(mean, "mean"), check_finite(var, "variance")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = check_finite(as_array(x), "softmax input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = check_finite(as_array(x), "log_softmax input")
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _pool_windows(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    if k < 1:
        raise ValueError("pool size must be >= 1")
    if h < k or w < k:
        raise ValueError(f"pool size {k} larger than spatial extent {h}x{w}")
    ho, wo = h // k, w // k
    # non-overlapping windows; trailing rows/cols that do not fill a window are dropped
    return x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)


def avg_pool2d(x: np.ndarray, k: int) -> np.ndarray:
    return _pool_windows(as_array(x), k).mean(axis=(3, 5))


def max_pool2d(x: np.ndarray, k: int) -> np.ndarray:
    return _pool_windows(as_array(x), k).max(axis=(3, 5))


def max_pool2d_argmax(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling plus the flat in-window index of the winner (first index on ties)."""
    win = _pool_windows(as_array(x), k)
    n, c, ho, _, wo, _ = win.shape
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


class SeededRng:
    """Counter-based (Philox) random stream with deterministic named children.

    Two instances built from the same seed produce identical draws on every
    platform numpy supports.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        ss = np.random.SeedSequence(self.seed & ((1 << 64) - 1))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "SeededRng":
        """Independent stream derived from this seed and ``keys`` (not from draws so far)."""
        ss = np.random.SeedSequence([self.seed & ((1 << 64) - 1)] + [_key_to_int(k) for k in keys])
        child = SeededRng.__new__(SeededRng)
        child.seed = int(ss.generate_state(2, np.uint64)[0])
        child._gen = np.random.Generator(np.random.Philox(ss))
        return child

    def randn(self, *shape: int, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=DTYPE) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, items: Sequence | np.ndarray | int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(items, size=size, replace=replace)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self._gen.random(size) < p

    def spawn_seed(self) -> int:
        return int(self._gen.integers(0, 2**63 - 1))
