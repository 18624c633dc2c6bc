"""Dense float32 tensor substrate.

Tensors are plain ``numpy.ndarray`` objects with float32 dtype.  Every
operation returns a new array; inputs are never written to.  Arithmetic and
layout work is recorded in an :class:`OpCounters` object that is bound to the
current context with :func:`counting`, so two threads (or two nested passes)
never share a counter.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import kernels

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@dataclass
class OpCounters:
    permutations: int = 0
    matmul_flops: int = 0

    def reset(self) -> None:
        self.permutations = 0
        self.matmul_flops = 0


_active: contextvars.ContextVar[OpCounters | None] = contextvars.ContextVar(
    "lightdetr_counters", default=None
)


@contextlib.contextmanager
def counting(counters: OpCounters | None = None) -> Iterator[OpCounters]:
    """Bind ``counters`` (or a fresh one) to the current context.

    >>> with counting() as c:
    ...     _ = matmul(np.ones((2, 3)), np.ones((3, 4)))
    >>> c.matmul_flops
    48
    """
    counters = OpCounters() if counters is None else counters
    token = _active.set(counters)
    try:
        yield counters
    finally:
        _active.reset(token)


def active_counters() -> OpCounters | None:
    return _active.get()


def add_flops(n: int) -> None:
    c = _active.get()
    if c is not None:
        c.matmul_flops += int(n)


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return x


def tensor(x, dtype=DTYPE) -> np.ndarray:
    """Contiguous float32 copy-or-view of ``x``."""
    return np.ascontiguousarray(x, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with optional leading batch dims; counts ``2*m*n*k`` per product."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.matmul(a, b)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    add_flops(2 * batch * m * n * k)
    return _check_finite(out, "matmul")


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        y += bias
    return y.reshape(*lead, weight.shape[1])


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for {x.ndim}-d input")
    z = x - np.max(x, axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= np.sum(z, axis=axis, keepdims=True)
    return z


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    out = xc / np.sqrt(var + eps) * weight + bias
    return _check_finite(out.astype(x.dtype, copy=False), "layer_norm")


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    y = x * x
    y *= x
    y *= 0.044715
    y += x
    y *= 0.7978845608028654
    np.tanh(y, out=y)
    y += 1.0
    y *= x
    y *= 0.5
    return y


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, DTYPE))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bilinear_sample(fmap: np.ndarray, points) -> np.ndarray:
    """Sample an (H, W, C) map at normalized (x, y) points.

    Pixel centres sit at ``((j + 0.5) / W, (i + 0.5) / H)``.  Corners that fall
    outside the map contribute zero.
    """
    fmap = tensor(fmap)
    if fmap.ndim != 3 or fmap.size == 0:
        raise ValueError(f"expected a non-empty (H, W, C) map, got shape {fmap.shape}")
    pts = np.ascontiguousarray(points, dtype=DTYPE).reshape(-1, 2)
    return _check_finite(kernels.bilinear_sample(fmap, pts), "bilinear_sample")


def permute_layout(x: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Materialize ``x.transpose(axes)`` as a new contiguous array (counted)."""
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"{axes} is not a permutation of {x.ndim} axes")
    out = np.ascontiguousarray(np.transpose(x, axes))
    if out is x:
        out = x.copy()
    c = _active.get()
    if c is not None:
        c.permutations += 1
    return out


def inverse_axes(axes: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(axes)
    for i, a in enumerate(axes):
        inv[a] = i
    return tuple(inv)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D convolution on an (H, W, Cin) map; ``weight`` is (kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d expects {cin} input channels, got {x.shape[-1]}")
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    if kh == 1 and kw == 1:
        cols = x[::stride, ::stride]
    else:
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(0, 1))
        # win: (Ho, Wo, Cin, kh, kw) -> (Ho, Wo, kh, kw, Cin)
        cols = win[::stride, ::stride].transpose(0, 1, 3, 4, 2)
    ho, wo = cols.shape[:2]
    y = matmul(np.ascontiguousarray(cols).reshape(ho * wo, kh * kw * cin), weight.reshape(-1, cout))
    if bias is not None:
        y += bias
    return y.reshape(ho, wo, cout)


def conv_transpose2x2(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Stride-2, kernel-2 transposed convolution; ``weight`` is (Cin, 2, 2, Cout)."""
    h, w, cin = x.shape
    cout = weight.shape[-1]
    y = matmul(x.reshape(h * w, cin), weight.reshape(cin, 4 * cout))
    y = y.reshape(h, w, 2, 2, cout).transpose(0, 2, 1, 3, 4).reshape(2 * h, 2 * w, cout)
    if bias is not None:
        y = y + bias
    return y
