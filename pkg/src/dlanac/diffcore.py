"""Small differentiable-operations layer on top of numpy.

Every trainable operation comes as a ``*_forward`` returning ``(out, cache)``
and a ``*_backward`` consuming the cache. Spatial ops work on batched
``(B, C, H, W)`` arrays; a single ``(C, H, W)`` map is accepted and returned
without the batch axis.

Storage is float32. :func:`float64_mode` switches the whole package to
float64, which the finite-difference checks rely on.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import as_strided

NORM_EPS = 1e-12

_dtype = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(RuntimeError):
    """Raised when a function or metric cannot produce a finite, defined value."""


class ConfigError(ValueError):
    """Raised for inconsistent hyperparameters or model settings."""


def get_dtype():
    return _dtype


def set_float64(enabled: bool) -> None:
    global _dtype
    _dtype = np.float64 if enabled else np.float32


@contextlib.contextmanager
def float64_mode():
    """Run the enclosed block with float64 as the working dtype."""
    previous = _dtype
    set_float64(True)
    try:
        yield
    finally:
        set_float64(previous is np.float64)


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=_dtype)


@dataclass
class Parameter:
    """A trainable tensor with an accumulated gradient of the same shape."""

    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=_dtype)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {self.value.shape}")
        # gradients live in the parameter dtype so optimizer state never drifts wider
        self.grad = self.grad + g.astype(self.grad.dtype, copy=False)

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected a (C,H,W) or (B,C,H,W) array, got shape {x.shape}")
    return x, False


def _hwc(x: np.ndarray) -> np.ndarray:
    # channels-last view of a (B, C, H, W) array; free when memory is already NHWC
    return x.transpose(0, 2, 3, 1)


def _chw(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 3, 1, 2)


def _im2col(xh: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Patches of a channels-last batch as rows of length ``k*k*C``."""
    # floor semantics: trailing rows/cols that do not fill a stride are skipped
    b, h, w, c = xh.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xh
    sb, sh, sw, sc = xp.strides
    win = as_strided(xp, shape=(b, ho, wo, k, k, c),
                     strides=(sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return win.reshape(b * ho * wo, k * k * c), ho, wo


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    """Scatter-add patch rows back onto a channels-last ``shape`` canvas."""
    b, h, w, c = shape
    cols = cols.reshape(b, ho, wo, k, k, c)
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        return xp[:, pad:pad + h, pad:pad + w, :]
    return xp


def _check_kernel(x: np.ndarray, w: np.ndarray, channel_axis: int) -> None:
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"kernel must be (C_a, C_b, k, k), got {w.shape}")
    if x.shape[1] != w.shape[channel_axis]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernel expects {w.shape[channel_axis]}")


# -- convolution -----------------------------------------------------------
# Arrays are (B, C, H, W) logically. Results are returned as transposed views
# of channels-last buffers, so chains of convolutions and elementwise ops
# never pay for a layout copy.

def conv2d_forward(x, w, b=None, stride: int = 1, pad: int = 0):
    """Cross-correlation of ``x`` (C_in channels) with ``w`` of shape (C_out, C_in, k, k)."""
    xb, squeeze = _batched(x)
    _check_kernel(xb, w, 1)
    k = w.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"conv2d needs an odd kernel size, got {k}")
    cols, ho, wo = _im2col(_hwc(xb), k, stride, pad)
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    out = cols @ wmat.T
    if b is not None:
        out += b
    out = _chw(out.reshape(xb.shape[0], ho, wo, w.shape[0]))
    cache = (cols, xb.shape, w, stride, pad, ho, wo, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(dout, cache):
    """Returns ``(dx, dw, db)``."""
    cols, xshape, w, stride, pad, ho, wo, squeeze = cache
    d, _ = _batched(dout)
    co, ci, k, _ = w.shape
    dmat = _hwc(d).reshape(-1, co)
    dw = (dmat.T @ cols).reshape(co, k, k, ci).transpose(0, 3, 1, 2)
    db = dmat.sum(axis=0)
    dcols = dmat @ w.transpose(0, 2, 3, 1).reshape(co, -1)
    bsz, _, h, wd = xshape
    dx = _chw(_col2im(dcols, (bsz, h, wd, ci), k, stride, pad, ho, wo))
    return (dx[0] if squeeze else dx), np.ascontiguousarray(dw), db


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0):
    return conv2d_forward(x, w, b, stride, pad)[0]


def transposed_conv2d_forward(x, w, b=None, stride: int = 1, pad: int = 0):
    """Adjoint of :func:`conv2d` for kernel ``w`` laid out as (C_in, C_out, k, k).

    Output side is ``stride*(H-1) + k - 2*pad``.
    """
    xb, squeeze = _batched(x)
    _check_kernel(xb, w, 0)
    bsz, ci, h, wd = xb.shape
    co, k = w.shape[1], w.shape[2]
    hout = stride * (h - 1) + k - 2 * pad
    wout = stride * (wd - 1) + k - 2 * pad
    if hout < 1 or wout < 1:
        raise DimensionError(f"transposed conv output would be {hout}x{wout}")
    xmat = _hwc(xb).reshape(-1, ci)
    cols = xmat @ w.transpose(0, 2, 3, 1).reshape(ci, -1)
    out = _col2im(cols, (bsz, hout, wout, co), k, stride, pad, h, wd)
    if b is not None:
        out = out + b
    out = _chw(out)
    cache = (xmat, xb.shape, w, stride, pad, squeeze)
    return (out[0] if squeeze else out), cache


def transposed_conv2d_backward(dout, cache):
    """Returns ``(dx, dw, db)``."""
    xmat, xshape, w, stride, pad, squeeze = cache
    d, _ = _batched(dout)
    ci, co, k, _ = w.shape
    dcols, h, wd = _im2col(_hwc(d), k, stride, pad)
    wmat = w.transpose(0, 2, 3, 1).reshape(ci, -1)
    dx = _chw((dcols @ wmat.T).reshape(xshape[0], h, wd, ci))
    dw = (xmat.T @ dcols).reshape(ci, k, k, co).transpose(0, 3, 1, 2)
    db = d.sum(axis=(0, 2, 3))
    return (dx[0] if squeeze else dx), np.ascontiguousarray(dw), db


def transposed_conv2d(x, w, b=None, stride: int = 1, pad: int = 0):
    return transposed_conv2d_forward(x, w, b, stride, pad)[0]


# -- elementwise -----------------------------------------------------------

def leaky_relu(x, slope: float = 0.2):
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dout, x, slope: float = 0.2):
    return np.where(x > 0, dout, slope * dout)


def tanh_backward(dout, y):
    """Gradient of tanh given its output ``y``."""
    return dout * (1.0 - y * y)


# -- row-wise maps ---------------------------------------------------------

def softmax_rows(m):
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(dout, s):
    """``s`` is the softmax output."""
    return s * (dout - (dout * s).sum(axis=-1, keepdims=True))


def l2_normalize_rows(m, eps: float = NORM_EPS):
    """Unit-norm rows; rows with norm below ``eps`` map to zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    safe = np.where(norm < eps, 1.0, norm)
    return np.where(norm < eps, 0.0, m / safe)


def l2_normalize_rows_backward(dout, m, eps: float = NORM_EPS):
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    safe = np.where(norm < eps, 1.0, norm)
    u = m / safe
    g = (dout - u * (dout * u).sum(axis=-1, keepdims=True)) / safe
    return np.where(norm < eps, 0.0, g)


# -- structural ------------------------------------------------------------

def channel_concat(a, b):
    if a.ndim != b.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"cannot concatenate shapes {a.shape} and {b.shape} on channels")
    # join along a trailing channel axis to keep channels-last memory order
    out = np.concatenate([np.moveaxis(a, -3, -1), np.moveaxis(b, -3, -1)], axis=-1)
    return np.moveaxis(out, -1, -3)


def channel_concat_backward(dout, c1: int):
    return dout[..., :c1, :, :], dout[..., c1:, :, :]


# -- gradient checking -----------------------------------------------------

def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], point, eps: float = 1e-6,
               coords: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-8) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f(x)`` returns ``(value, grad)``. With ``coords`` set, only that many
    randomly chosen coordinates are probed. Components smaller than ``floor``
    are compared on that absolute scale, which keeps exact zeros (where the
    difference quotient is pure rounding noise) from dominating the result.
    """
    x = np.array(point, dtype=np.float64)
    _, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    idx = np.arange(x.size)
    if coords is not None and coords < x.size:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(x.size, size=coords, replace=False)
    flat = x.ravel()
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x)[0])
        flat[i] = old - eps
        fm = float(f(x)[0])
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite value at coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        denom = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
