"""Numeric kernels shared by the layers.

Tensors are plain C-ordered ``numpy.ndarray`` objects.  Training runs in
float32; gradient checking switches the global precision to float64 with
:func:`precision`.
"""
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_current_dtype = np.float32


def get_dtype():
    return _current_dtype


def set_precision(name):
    """Set the dtype used for freshly created tensors ("float32" or "float64")."""
    global _current_dtype
    try:
        _current_dtype = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}") from None


@contextmanager
def precision(name):
    previous = np.dtype(_current_dtype).name
    set_precision(name)
    try:
        yield get_dtype()
    finally:
        set_precision(previous)


def as_tensor(values, dtype=None):
    return np.ascontiguousarray(values, dtype=dtype or _current_dtype)


def matmul(a, b):
    """Matrix product of an (M, K) and a (K, N) array."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def conv_output_size(size, k, s, p):
    """Floor-rounded output extent of a k-wide window with stride s and padding p."""
    out = (size + 2 * p - k) // s + 1
    if out < 1:
        raise DimensionError(
            f"window {k} with stride {s} and padding {p} leaves no output on extent {size}"
        )
    return out


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected a (C, H, W) or (B, C, H, W) array, got shape {x.shape}")


def im2col(x, k, s=1, p=0):
    """Unfold receptive fields into columns.

    A (C, H, W) input gives a (C*k*k, H_out*W_out) array whose column j
    holds the receptive field of output position j; rows are ordered
    (c, ki, kj).  A (B, C, H, W) batch gives (B, C*k*k, H_out*W_out).
    Positions outside the image read as zero.
    """
    xb, single = _as_batch(np.asarray(x))
    B, C, H, W = xb.shape
    Ho = conv_output_size(H, k, s, p)
    Wo = conv_output_size(W, k, s, p)
    if p:
        xb = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    # (B, C, Ho, Wo, k, k) -> (B, C, k, k, Ho, Wo)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, Ho * Wo)
    return cols[0] if single else cols


def col2im(cols, shape, k, s=1, p=0):
    """Scatter-add columns back onto an image of ``shape``; adjoint of :func:`im2col`."""
    if len(shape) == 3:
        B, (C, H, W), single = 1, shape, True
    elif len(shape) == 4:
        (B, C, H, W), single = shape, False
    else:
        raise DimensionError(f"expected a 3- or 4-d target shape, got {shape}")
    Ho = conv_output_size(H, k, s, p)
    Wo = conv_output_size(W, k, s, p)
    cols = np.asarray(cols)
    expected = (C * k * k, Ho * Wo) if single else (B, C * k * k, Ho * Wo)
    if cols.shape != expected:
        raise DimensionError(
            f"columns of shape {cols.shape} do not match geometry {tuple(shape)} "
            f"with k={k}, s={s}, p={p} (expected {expected})"
        )
    blocks = cols.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += blocks[:, :, i, j]
    if p:
        out = np.ascontiguousarray(out[:, :, p:p + H, p:p + W])
    return out[0] if single else out
