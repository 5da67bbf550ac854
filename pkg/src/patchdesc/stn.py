"""Spatial transformer: localisation network, grid generator and bilinear sampler.

The transform has four parameters per sample, rotation angle ``theta``,
isotropic ``scale`` and translation ``(tx, ty)``, expanding to::

    A = [[scale*cos(theta), -scale*sin(theta), tx],
         [scale*sin(theta),  scale*cos(theta), ty]]

Coordinates are normalised so that (-1, -1) is the centre of the top-left
pixel and (1, 1) the centre of the bottom-right pixel; x runs along
columns and y along rows.  Output pixel (xt, yt) samples the input at
``A @ (xt, yt, 1)``, reading zero outside the image.
"""
from dataclasses import dataclass

import numpy as np

from .arch import FC, backward_sequence, forward_sequence, init_sequence, layer_names, parse_arch
from .errors import DimensionError, InvalidGridError
from .layers import LayerCache

LOCALISATION = "convBlock[32,5,1,2]-pool[2]-convBlock[64,5,1,2]-pool[2]-convBlock[128,5,1,2]-fc[256]-fc[4]"
LOCALISATION_SPEC = parse_arch(LOCALISATION)

# raw output of the last fc layer that maps to the identity transform
IDENTITY_RAW = np.array([0.0, 1.0, 0.0, 0.0])
SCALE_RANGE = (0.25, 4.0)
_SNAP = 1e-6


@dataclass
class AffineParams4:
    theta: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def as_array(self):
        return np.array([[self.theta, self.scale, self.tx, self.ty]], dtype=np.float64)

    def matrix(self):
        return affine_matrix(self.as_array())[0]


def affine_matrix(affine):
    """(B, 4) parameter rows to (B, 2, 3) matrices."""
    affine = np.asarray(affine, dtype=np.float64)
    theta, scale, tx, ty = affine.T
    c, s = scale * np.cos(theta), scale * np.sin(theta)
    return np.stack([np.stack([c, -s, tx], axis=1), np.stack([s, c, ty], axis=1)], axis=1)


def raw_to_affine(raw):
    """Map raw localisation outputs to (theta, scale, tx, ty), clamping the scale."""
    affine = np.array(raw, dtype=np.float64, copy=True)
    affine[:, 1] = np.clip(affine[:, 1], *SCALE_RANGE)
    return affine


def raw_to_affine_backward(daffine, raw):
    draw = np.array(daffine, copy=True)
    inside = (raw[:, 1] > SCALE_RANGE[0]) & (raw[:, 1] < SCALE_RANGE[1])
    draw[:, 1] *= inside
    return draw


def target_lattice(H, W):
    xt = np.linspace(-1.0, 1.0, W)
    yt = np.linspace(-1.0, 1.0, H)
    return np.meshgrid(xt, yt)  # each (H, W)


def grid_generator(affine, H, W):
    """Sampling grid (B, H, W, 2) of source (x, y) locations for every output pixel."""
    if H < 2 or W < 2:
        raise DimensionError(f"grid needs at least 2x2 output pixels, got {H}x{W}")
    if isinstance(affine, AffineParams4):
        affine = affine.as_array()
    A = affine_matrix(affine)
    xt, yt = target_lattice(H, W)
    xs = A[:, 0, 0, None, None] * xt + A[:, 0, 1, None, None] * yt + A[:, 0, 2, None, None]
    ys = A[:, 1, 0, None, None] * xt + A[:, 1, 1, None, None] * yt + A[:, 1, 2, None, None]
    return np.stack([xs, ys], axis=-1)


def grid_generator_backward(dgrid, affine):
    """Gradient of a scalar objective w.r.t. the (B, 4) affine parameters."""
    affine = np.asarray(affine, dtype=np.float64)
    _, H, W, _ = dgrid.shape
    xt, yt = target_lattice(H, W)
    dxs, dys = dgrid[..., 0], dgrid[..., 1]
    dA11 = np.sum(dxs * xt, axis=(1, 2))
    dA12 = np.sum(dxs * yt, axis=(1, 2))
    dA21 = np.sum(dys * xt, axis=(1, 2))
    dA22 = np.sum(dys * yt, axis=(1, 2))
    theta, scale = affine[:, 0], affine[:, 1]
    cos, sin = np.cos(theta), np.sin(theta)
    dtheta = scale * (-dA11 * sin - dA12 * cos + dA21 * cos - dA22 * sin)
    dscale = dA11 * cos - dA12 * sin + dA21 * sin + dA22 * cos
    return np.stack([dtheta, dscale, dxs.sum(axis=(1, 2)), dys.sum(axis=(1, 2))], axis=1)


def _to_pixels(coord, size):
    px = (coord + 1.0) * ((size - 1) / 2.0)
    nearest = np.rint(px)
    # pixel centres must map exactly so that the identity grid reproduces its input
    return np.where(np.abs(px - nearest) < _SNAP, nearest, px)


def bilinear_sample_forward(x, grid):
    """Bilinearly sample ``x`` (B, C, H, W) at ``grid`` (B, Ho, Wo, 2)."""
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise InvalidGridError("sampling grid contains NaN or infinite coordinates")
    B, C, H, W = x.shape
    if grid.ndim != 4 or grid.shape[0] != B or grid.shape[-1] != 2:
        raise DimensionError(f"grid shape {grid.shape} does not match input batch {x.shape}")
    Ho, Wo = grid.shape[1:3]
    px = _to_pixels(grid[..., 0], W)
    py = _to_pixels(grid[..., 1], H)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    batch = np.arange(B)[:, None, None] * (H * W)

    x_flat = x.transpose(1, 0, 2, 3).reshape(C, B * H * W)
    corners = []
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx_, y0 + dy_
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(valid, batch + yi * W + xi, 0).ravel()
        vals = x_flat[:, idx] * valid.ravel().astype(x.dtype)
        corners.append((idx, valid.ravel(), vals))

    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    weights = [(wy[a] * wx[b]).ravel().astype(x.dtype) for a, b in ((0, 0), (0, 1), (1, 0), (1, 1))]
    out = sum(w * vals for w, (_, _, vals) in zip(weights, corners))
    y = np.ascontiguousarray(out.reshape(C, B, Ho, Wo).transpose(1, 0, 2, 3))
    cache = LayerCache("sampler", x_shape=x.shape, corners=corners, weights=weights,
                       fx=fx, fy=fy, grid_shape=grid.shape)
    return y, cache


def bilinear_sample_backward(dy, cache):
    """Gradients w.r.t. the sampled input and the grid."""
    cache.expect("sampler")
    B, C, H, W = cache.x_shape
    _, Ho, Wo, _ = cache.grid_shape
    if dy.shape != (B, C, Ho, Wo):
        raise DimensionError(f"sampler backward: gradient shape {dy.shape} != {(B, C, Ho, Wo)}")
    dy_flat = dy.transpose(1, 0, 2, 3).reshape(C, -1)
    n = B * H * W
    offsets = (np.arange(C) * n)[:, None]
    dx = np.zeros(C * n, dtype=np.float64)
    for w, (idx, valid, _) in zip(cache.weights, cache.corners):
        contrib = dy_flat * (w * valid)
        dx += np.bincount((offsets + idx).ravel(), weights=contrib.ravel(), minlength=C * n)
    dx = dx.reshape(C, B, H, W).transpose(1, 0, 2, 3).astype(dy.dtype)

    v00, v01, v10, v11 = (vals for _, _, vals in cache.corners)
    fx = cache.fx.ravel()
    fy = cache.fy.ravel()
    dpx = np.sum(dy_flat * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy), axis=0)
    dpy = np.sum(dy_flat * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx), axis=0)
    dgrid = np.stack([
        dpx.reshape(B, Ho, Wo) * ((W - 1) / 2.0),
        dpy.reshape(B, Ho, Wo) * ((H - 1) / 2.0),
    ], axis=-1)
    return np.ascontiguousarray(dx), dgrid


# -- localisation network ---------------------------------------------------

def init_localisation(in_shape, seed, spec=LOCALISATION_SPEC, prefix="stn."):
    """Random localisation weights, with the output layer set to the identity transform."""
    if not isinstance(spec.tokens[-1], FC) or spec.tokens[-1].n != 4:
        raise ValueError("localisation network must end in fc[4]")
    params, buffers = init_sequence(spec, in_shape, seed, prefix=prefix)
    last = layer_names(spec, prefix)[-1]
    params[f"{last}.weight"][...] = 0
    params[f"{last}.bias"][...] = IDENTITY_RAW
    return params, buffers


def localisation_forward(x, params, buffers, train=True, spec=LOCALISATION_SPEC, prefix="stn.", momentum=0.9):
    """Predict (B, 4) transform parameters (theta, scale, tx, ty) for a batch."""
    raw, caches = forward_sequence(spec, params, buffers, x, train, prefix=prefix, momentum=momentum)
    if raw.ndim != 2 or raw.shape[1] != 4:
        raise DimensionError(f"localisation network must output 4 values per sample, got {raw.shape}")
    return raw_to_affine(raw), LayerCache("localisation", raw=raw, caches=caches)


def localisation_backward(daffine, cache, params, spec=LOCALISATION_SPEC, prefix="stn."):
    cache.expect("localisation")
    draw = raw_to_affine_backward(daffine, cache.raw).astype(cache.raw.dtype)
    return backward_sequence(spec, params, draw, cache.caches, prefix=prefix)


def stn_forward(x, params, buffers, train=True, spec=LOCALISATION_SPEC, prefix="stn.", momentum=0.9):
    """Warp every sample of ``x`` by its own predicted transform."""
    affine, loc_cache = localisation_forward(x, params, buffers, train, spec, prefix, momentum)
    B, C, H, W = x.shape
    grid = grid_generator(affine, H, W)
    y, s_cache = bilinear_sample_forward(x, grid)
    return y, LayerCache("stn", affine=affine, loc=loc_cache, sampler=s_cache)


def stn_backward(dy, cache, params, spec=LOCALISATION_SPEC, prefix="stn."):
    """Returns (dx, grads) with grads keyed by localisation parameter name."""
    cache.expect("stn")
    dx_sample, dgrid = bilinear_sample_backward(dy, cache.sampler)
    daffine = grid_generator_backward(dgrid, cache.affine)
    dx_loc, grads = localisation_backward(daffine, cache.loc, params, spec, prefix)
    return dx_sample + dx_loc, grads
