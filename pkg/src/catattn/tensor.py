"""Dense NCHW numerics shared by every higher layer.

Tensors are plain ``numpy.ndarray`` objects in channel-first layout
(N, C, H, W); lower-rank tensors use a suffix of that order. The functions
here are pure: they never mutate their inputs.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12

_default_dtype = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def as_tensor(data, dtype=None) -> np.ndarray:
    """Convert ``data`` to a contiguous array with every extent >= 1."""
    arr = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
    return arr


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def _pad4(padding) -> tuple[int, int, int, int]:
    """Normalise padding to (top, bottom, left, right)."""
    if isinstance(padding, int):
        return (padding,) * 4
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    if len(padding) == 4:
        return padding  # type: ignore[return-value]
    raise ValueError(f"padding must have 1, 2 or 4 entries, got {padding}")


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    out = set()
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        out.add(a % ndim)
    if not out:
        raise ValueError("axis set must be non-empty")
    return tuple(sorted(out))


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    """Shape of ``a op b`` where extent-1 axes expand; raises on mismatch."""
    try:
        return tuple(np.broadcast_shapes(tuple(a), tuple(b)))
    except ValueError:
        raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} are not broadcastable") from None


# --------------------------------------------------------------------------
# Convolution and dense layers
# --------------------------------------------------------------------------


def conv2d_output_size(h: int, w: int, kh: int, kw: int, padding=0, stride=1) -> tuple[int, int]:
    pt, pb, pl, pr = _pad4(padding)
    sh, sw = _pair(stride)
    return (h + pt + pb - kh) // sh + 1, (w + pl + pr - kw) // sw + 1


def _check_conv(x: np.ndarray, kernel: np.ndarray, bias, padding, stride):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKhKw kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has C={x.shape[1]}, "
            f"kernel {kernel.shape} expects I={kernel.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match O={kernel.shape[0]}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if min(_pad4(padding)) < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    ho, wo = conv2d_output_size(x.shape[2], x.shape[3], kernel.shape[2], kernel.shape[3], padding, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"padding {padding}, stride {stride}"
        )
    return ho, wo


def im2col(x: np.ndarray, kh: int, kw: int, padding=0, stride=1) -> np.ndarray:
    """Patch matrix of shape (N*H'*W', kh*kw*C) for cross-correlation.

    Rows follow (n, h', w') in C order; columns follow (i, j, c).
    """
    pt, pb, pl, pr = _pad4(padding)
    sh, sw = _pair(stride)
    n, c = x.shape[:2]
    xl = x.transpose(0, 2, 3, 1)
    if pt or pb or pl or pr:
        xl = np.pad(xl, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    if kh == kw == 1:
        xl = xl[:, ::sh, ::sw]
        return np.ascontiguousarray(xl).reshape(-1, c)
    win = sliding_window_view(xl, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    ho, wo = win.shape[1:3]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    cols[...] = win.transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(-1, kh * kw * c)


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    o = kernel.shape[0]
    return np.ascontiguousarray(kernel.transpose(2, 3, 1, 0)).reshape(-1, o)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None, padding=0, stride=1) -> np.ndarray:
    out, _ = conv2d_with_cols(x, kernel, bias, padding, stride)
    return out


def conv2d_with_cols(x, kernel, bias=None, padding=0, stride=1):
    """Forward convolution that also returns the patch matrix for reuse in backward."""
    ho, wo = _check_conv(x, kernel, bias, padding, stride)
    o, _, kh, kw = kernel.shape
    cols = im2col(x, kh, kw, padding, stride)
    out = cols @ _kernel_matrix(kernel)
    if bias is not None:
        out += bias
    out = out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_backward(grad_out, x_shape, cols, kernel, padding=0, stride=1):
    """Gradients (input, kernel, bias) of a cross-correlation.

    ``cols`` is the patch matrix returned by :func:`conv2d_with_cols`. The input
    gradient is computed as a transposed convolution: the output gradient is
    dilated by the stride, padded, and correlated with the flipped kernel.
    """
    n, c, h, w = x_shape
    o, _, kh, kw = kernel.shape
    pt, pb, pl, pr = _pad4(padding)
    sh, sw = _pair(stride)
    ho, wo = grad_out.shape[2:]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_kernel = (cols.T @ g).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    if sh > 1 or sw > 1:
        dil = np.zeros((n, o, (ho - 1) * sh + 1, (wo - 1) * sw + 1), dtype=grad_out.dtype)
        dil[:, :, ::sh, ::sw] = grad_out
    else:
        dil = grad_out
    # rows of the padded input never touched by a window (stride remainder)
    extra_h = h + pt + pb - ((ho - 1) * sh + kh)
    extra_w = w + pl + pr - ((wo - 1) * sw + kw)
    top, bottom = kh - 1 - pt, kh - 1 - pb + extra_h
    left, right = kw - 1 - pl, kw - 1 - pr + extra_w
    dil = np.pad(dil, ((0, 0), (0, 0), (max(top, 0), max(bottom, 0)), (max(left, 0), max(right, 0))))
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gx = conv2d(dil, np.ascontiguousarray(flipped))
    # negative pads (padding wider than kernel - 1) become crops
    gx = gx[:, :, max(-top, 0) : gx.shape[2] - max(-bottom, 0), max(-left, 0) : gx.shape[3] - max(-right, 0)]
    return np.ascontiguousarray(gx), np.ascontiguousarray(grad_kernel), grad_bias


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match Cout={weight.shape[0]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


# --------------------------------------------------------------------------
# Pointwise operations
# --------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def log_clamped(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, LOG_FLOOR))


def negate(x: np.ndarray) -> np.ndarray:
    return -x


def scale(x: np.ndarray, s: float) -> np.ndarray:
    return x * x.dtype.type(s)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    broadcast_shape(a.shape, b.shape)
    return a + b


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    broadcast_shape(a.shape, b.shape)
    return a * b


ELEMENTWISE = {
    "sigmoid": sigmoid,
    "relu": relu,
    "log_clamped": log_clamped,
    "negate": negate,
}


def elementwise(fn: str, x: np.ndarray, other=None) -> np.ndarray:
    """Dispatch a named pointwise op; binary ops take ``other``."""
    if fn in ELEMENTWISE:
        return ELEMENTWISE[fn](x)
    if fn == "scale":
        return scale(x, other)
    if fn == "add":
        return add(x, other)
    if fn == "multiply":
        return multiply(x, other)
    raise ValueError(f"unknown elementwise op {fn!r}")


# --------------------------------------------------------------------------
# Reductions and softmax
# --------------------------------------------------------------------------


def softmax_along(x: np.ndarray, axes) -> np.ndarray:
    """Numerically stable softmax jointly over ``axes``."""
    axes = _normalize_axes(axes, x.ndim)
    e = np.exp(x - x.max(axis=axes, keepdims=True))
    return e / e.sum(axis=axes, keepdims=True)


def _flatten_reduced(x: np.ndarray, axes: tuple[int, ...]) -> tuple[np.ndarray, tuple[int, ...]]:
    """Move ``axes`` last and merge them; returns the view and the keepdims shape."""
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    kd = tuple(1 if a in axes else x.shape[a] for a in range(x.ndim))
    return flat, kd


def reduce_along(x: np.ndarray, axes, kind: str = "mean"):
    """Reduce over ``axes`` keeping them as extent 1.

    For ``kind="max"`` returns ``(values, argmax)`` where ``argmax`` is the
    first-occurrence flat index inside each reduced block (C-order over the
    reduced axes). ``kind="mean"`` returns the values only.
    """
    axes = _normalize_axes(axes, x.ndim)
    if kind == "mean":
        return x.mean(axis=axes, keepdims=True)
    if kind == "max":
        flat, kd = _flatten_reduced(x, axes)
        idx = flat.argmax(axis=-1)
        vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return vals.reshape(kd), idx.reshape(kd)
    raise ValueError(f"unknown reduction {kind!r}")


def argmax_mask(x: np.ndarray, axes) -> np.ndarray:
    """0/1 mask selecting the first maximum of each reduced block."""
    axes = _normalize_axes(axes, x.ndim)
    flat, _ = _flatten_reduced(x, axes)
    hot = np.zeros_like(flat)
    np.put_along_axis(hot, flat.argmax(axis=-1)[..., None], 1, axis=-1)
    keep = [a for a in range(x.ndim) if a not in axes]
    moved_shape = tuple(x.shape[a] for a in keep) + tuple(x.shape[a] for a in axes)
    inv = np.argsort(keep + list(axes))
    return np.transpose(hot.reshape(moved_shape), inv)


# --------------------------------------------------------------------------
# Gaussian low-pass prefilter
# --------------------------------------------------------------------------


def gaussian_kernel(k: int, sigma: float = 1.0, dtype=np.float64) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"gaussian kernel size must be odd and >= 1, got {k}")
    d = np.arange(k, dtype=np.float64) - k // 2
    g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return (g / g.sum()).astype(dtype)


@functools.lru_cache(maxsize=64)
def _gaussian_operator(n: int, k: int, sigma: float, dtype) -> np.ndarray:
    g = gaussian_kernel(k, sigma)
    half = k // 2
    src = np.pad(np.arange(n), half, mode="reflect") if half else np.arange(n)
    m = np.zeros((n, n))
    for i in range(n):
        for t in range(k):
            m[i, src[i + t]] += g[t]
    m = m.astype(dtype)
    m.flags.writeable = False
    return m


def gaussian_operator(n: int, k: int, sigma: float = 1.0, dtype=np.float64) -> np.ndarray:
    """n x n matrix applying a reflect-padded 1-D Gaussian along one axis."""
    return _gaussian_operator(n, k, float(sigma), np.dtype(dtype))


def gaussian_filter(x: np.ndarray, k: int, mode: str = "full-2D", sigma: float = 1.0) -> np.ndarray:
    """Per-channel Gaussian smoothing with reflect borders.

    ``mode="vertical-1D"`` filters along H only (a k x 1 kernel);
    ``mode="full-2D"`` applies the separable k x k product filter.
    """
    if x.ndim != 4:
        raise ShapeError(f"gaussian_filter expects NCHW, got {x.shape}")
    if mode not in ("vertical-1D", "full-2D"):
        raise ValueError(f"unknown gaussian mode {mode!r}")
    mh = gaussian_operator(x.shape[2], k, sigma, x.dtype)
    out = mh @ x
    if mode == "full-2D":
        out = out @ gaussian_operator(x.shape[3], k, sigma, x.dtype).T
    return out


def is_distribution(p: np.ndarray, axes, tol: float = 1e-6) -> bool:
    axes = _normalize_axes(axes, p.ndim)
    return bool(np.all(p >= 0) and np.all(p <= 1) and np.allclose(p.sum(axis=axes), 1.0, atol=tol, rtol=0))


def entropy_of(x: np.ndarray, axes) -> np.ndarray:
    """Shannon entropy of ``softmax_along(x, axes)``, reduced axes kept."""
    p = softmax_along(x, axes)
    return -(p * log_clamped(p)).sum(axis=_normalize_axes(axes, x.ndim), keepdims=True)
