"""Forward and backward passes for the layer types of the descriptor network.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes that cache.  Arrays are NCHW.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, DimensionError, InvalidCacheError
from .tensor import col2im, conv_output_size, im2col

L2_GUARD = 1e-12


class LayerCache:
    """Intermediates saved by one forward call."""

    def __init__(self, kind, **saved):
        self.kind = kind
        self.__dict__.update(saved)

    def expect(self, kind):
        if self.kind != kind:
            raise InvalidCacheError(f"{kind} backward received a cache from {self.kind} forward")
        return self


def _check_cache(cache, kind):
    if not isinstance(cache, LayerCache):
        raise InvalidCacheError(f"{kind} backward called without a forward cache")
    return cache.expect(kind)


def _check_grad_shape(dy, shape, kind):
    if dy.shape != tuple(shape):
        raise DimensionError(f"{kind} backward: gradient shape {dy.shape} != output shape {tuple(shape)}")


@dataclass
class ConvParams:
    weights: np.ndarray  # (N, C, k, k)
    bias: np.ndarray  # (N,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise DimensionError(f"conv weights must be (N, C, k, k), got {self.weights.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride {self.stride} / padding {self.padding}")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5


# -- convolution ------------------------------------------------------------

def conv_forward(x, p):
    """Cross-correlate a (B, C, H, W) batch with ``p.weights`` and add the bias."""
    if x.ndim != 4:
        raise DimensionError(f"conv input must be (B, C, H, W), got {x.shape}")
    N, C, k, _ = p.weights.shape
    B, Cx, H, W = x.shape
    if Cx != C:
        raise DimensionError(f"conv input has {Cx} channels, weights expect {C}")
    Ho = conv_output_size(H, k, p.stride, p.padding)
    Wo = conv_output_size(W, k, p.stride, p.padding)
    cols = im2col(x, k, p.stride, p.padding)  # (B, C*k*k, Ho*Wo)
    y = np.matmul(p.weights.reshape(N, -1), cols)
    y += p.bias[:, None]
    # cols are recomputed in backward: caching them costs ~k*k times the input
    return y.reshape(B, N, Ho, Wo), LayerCache("conv", x=x, out_shape=(B, N, Ho, Wo))


def conv_backward(dy, cache, p):
    cache = _check_cache(cache, "conv")
    _check_grad_shape(dy, cache.out_shape, "conv")
    x = cache.x
    N, C, k, _ = p.weights.shape
    B = x.shape[0]
    dy_mat = dy.reshape(B, N, -1)
    cols = im2col(x, k, p.stride, p.padding)
    dweights = np.zeros((N, C * k * k), dtype=dy.dtype)
    for b in range(B):
        dweights += dy_mat[b] @ cols[b].T
    dbias = dy_mat.sum(axis=(0, 2))
    dcols = np.matmul(p.weights.reshape(N, -1).T, dy_mat)
    dx = col2im(dcols, x.shape, k, p.stride, p.padding)
    return dx, dweights.reshape(p.weights.shape), dbias


# -- ReLU -------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, LayerCache("relu", mask=mask)


def relu_backward(dy, cache):
    cache = _check_cache(cache, "relu")
    _check_grad_shape(dy, cache.mask.shape, "relu")
    return dy * cache.mask


# -- batch normalisation ----------------------------------------------------

def batchnorm_forward(x, p, train=True):
    """Per-channel normalisation of a (B, C, H, W) batch.

    In training mode the batch statistics are used and the running
    statistics of ``p`` are updated in place.
    """
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise DimensionError(f"batchnorm input {x.shape} does not match {p.gamma.shape[0]} channels")
    shape = (1, -1, 1, 1)
    if not train:
        inv_std = 1.0 / np.sqrt(p.running_var + p.epsilon)
        scale = (p.gamma * inv_std).reshape(shape)
        shift = (p.beta - p.running_mean * p.gamma * inv_std).reshape(shape)
        return x * scale + shift, LayerCache("batchnorm_eval")

    B, C, H, W = x.shape
    count = B * H * W
    if count < 2:
        raise DegenerateBatchError("batchnorm in training mode needs at least two values per channel")
    mean = np.einsum("bchw->c", x) / count
    x_hat = x - mean.reshape(shape)
    var = np.einsum("bci,bci->c", x_hat.reshape(B, C, -1), x_hat.reshape(B, C, -1)) / count
    inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(x.dtype)
    x_hat *= inv_std.reshape(shape)
    y = x_hat * p.gamma.reshape(shape)
    y += p.beta.reshape(shape)

    m = p.momentum
    p.running_mean[...] = m * p.running_mean + (1 - m) * mean
    p.running_var[...] = m * p.running_var + (1 - m) * var
    return y, LayerCache("batchnorm", x_hat=x_hat, inv_std=inv_std, count=count)


def batchnorm_backward(dy, cache, p):
    if isinstance(cache, LayerCache) and cache.kind == "batchnorm_eval":
        raise InvalidCacheError("batchnorm backward needs a training-mode cache")
    cache = _check_cache(cache, "batchnorm")
    _check_grad_shape(dy, cache.x_hat.shape, "batchnorm")
    shape = (1, -1, 1, 1)
    x_hat = cache.x_hat
    B, C = dy.shape[:2]
    dbeta = np.einsum("bchw->c", dy)
    dgamma = np.einsum("bci,bci->c", dy.reshape(B, C, -1), x_hat.reshape(B, C, -1))
    # with dx_hat = gamma * dy the channel sums follow from dbeta and dgamma
    k = (p.gamma * cache.inv_std / cache.count).reshape(shape)
    dx = x_hat * (-dgamma.reshape(shape))
    dx += cache.count * dy
    dx -= dbeta.reshape(shape)
    dx *= k
    return dx, dgamma, dbeta


# -- max pooling ------------------------------------------------------------

def maxpool_forward(x, k, s=None):
    """k x k max pooling with stride ``s`` (default k), floor rounding.

    Ties go to the first element of the window in row-major order.
    """
    s = k if s is None else s
    B, C, H, W = x.shape
    if k > H or k > W:
        raise DimensionError(f"pool window {k} larger than input {H}x{W}")
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::s, ::s][:, :, :Ho, :Wo].reshape(B, C, Ho, Wo, k * k)
    argmax = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return y, LayerCache("maxpool", argmax=argmax, in_shape=x.shape, k=k, s=s)


def maxpool_backward(dy, cache):
    cache = _check_cache(cache, "maxpool")
    _check_grad_shape(dy, cache.argmax.shape, "maxpool")
    k, s = cache.k, cache.s
    Ho, Wo = dy.shape[2:]
    dx = np.zeros(cache.in_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            hit = cache.argmax == i * k + j
            dx[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dy * hit
    return dx


# -- fully connected --------------------------------------------------------

def fc_forward(x, weights, bias):
    """Affine map of a (B, D) batch by (D, M) weights; 4-d inputs are flattened."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weights.shape[0]:
        raise DimensionError(f"fc input has {flat.shape[1]} features, weights expect {weights.shape[0]}")
    return flat @ weights + bias, LayerCache("fc", x=flat, in_shape=x.shape)


def fc_backward(dy, cache, weights):
    cache = _check_cache(cache, "fc")
    _check_grad_shape(dy, (cache.x.shape[0], weights.shape[1]), "fc")
    dx = (dy @ weights.T).reshape(cache.in_shape)
    return dx, cache.x.T @ dy, dy.sum(axis=0)


# -- L2 normalisation -------------------------------------------------------

def l2norm_forward(x):
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    denom = np.maximum(norm, L2_GUARD)
    y = x / denom
    return y, LayerCache("l2norm", y=y, denom=denom, active=norm > L2_GUARD)


def l2norm_backward(dy, cache):
    cache = _check_cache(cache, "l2norm")
    _check_grad_shape(dy, cache.y.shape, "l2norm")
    y = cache.y
    # project onto the tangent space of the sphere; rows under the guard are a plain scaling
    radial = np.sum(y * dy, axis=1, keepdims=True) * cache.active
    return (dy - y * radial) / cache.denom


# -- global average pooling -------------------------------------------------

def global_avgpool_forward(x):
    if x.ndim != 4:
        raise DimensionError(f"global average pooling expects (B, C, H, W), got {x.shape}")
    return x.mean(axis=(2, 3)), LayerCache("gap", in_shape=x.shape)


def global_avgpool_backward(dy, cache):
    cache = _check_cache(cache, "gap")
    B, C, H, W = cache.in_shape
    _check_grad_shape(dy, (B, C), "gap")
    return np.broadcast_to((dy / (H * W))[:, :, None, None], cache.in_shape).copy()
