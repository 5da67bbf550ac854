"""Architecture strings such as ``convBlock[32,3,1,1]-pool[2]-...-L2norm``.

A string is a ``-`` separated list of tokens:

``convBlock[N,w,s,p]``
    convolution with N filters of size w x w, stride s, padding p,
    followed by ReLU and batch normalisation
``pool[k]``
    k x k max pooling with stride k
``fc[n]``
    fully connected layer with n outputs
``gap``
    global average pooling over the spatial extent
``L2norm``
    row-wise unit-length normalisation
``stn``
    spatial transformer with the standard localisation network
"""
import re
import zlib
from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import DimensionError, ParseError
from .tensor import conv_output_size, get_dtype


@dataclass(frozen=True)
class ConvBlock:
    n: int
    w: int
    s: int
    p: int

    def render(self):
        return f"convBlock[{self.n},{self.w},{self.s},{self.p}]"


@dataclass(frozen=True)
class Pool:
    k: int

    def render(self):
        return f"pool[{self.k}]"


@dataclass(frozen=True)
class FC:
    n: int

    def render(self):
        return f"fc[{self.n}]"


@dataclass(frozen=True)
class GAP:
    def render(self):
        return "gap"


@dataclass(frozen=True)
class L2Norm:
    def render(self):
        return "L2norm"


@dataclass(frozen=True)
class STN:
    def render(self):
        return "stn"


_BRACKETED = {"convBlock": (ConvBlock, 4), "pool": (Pool, 1), "fc": (FC, 1)}
_BARE = {"gap": GAP, "L2norm": L2Norm, "stn": STN}
_TOKEN = re.compile(r"([A-Za-z][A-Za-z0-9]*)(?:\[([^\[\]]*)\])?")


@dataclass(frozen=True)
class ArchSpec:
    tokens: tuple

    def render(self):
        return "-".join(t.render() for t in self.tokens)

    def __str__(self):
        return self.render()

    def __iter__(self):
        return iter(self.tokens)

    def __len__(self):
        return len(self.tokens)

    def count(self, kind):
        return sum(isinstance(t, kind) for t in self.tokens)


def parse_arch(text):
    """Parse an architecture string into an :class:`ArchSpec`."""
    # tolerate line breaks and soft hyphens left over from typeset strings
    text = re.sub(r"\s+|\\-", "", text)
    if not text:
        raise ParseError("empty architecture string", 0)
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        name, args = m.group(1), m.group(2)
        if name in _BRACKETED:
            cls, arity = _BRACKETED[name]
            if args is None:
                raise ParseError(f"{name} needs {arity} bracketed argument(s)", pos)
            parts = args.split(",") if args else []
            if len(parts) != arity:
                raise ParseError(f"{name} takes {arity} argument(s), got {len(parts)}", pos)
            try:
                values = [int(v) for v in parts]
            except ValueError:
                raise ParseError(f"non-integer argument in {m.group(0)!r}", pos) from None
            if any(v < 0 for v in values) or any(v < 1 for v in values[:3]):
                raise ParseError(f"invalid argument value in {m.group(0)!r}", pos)
            tokens.append(cls(*values))
        elif name in _BARE:
            if args is not None:
                raise ParseError(f"{name} takes no arguments", pos)
            tokens.append(_BARE[name]())
        else:
            raise ParseError(f"unknown token {name!r}", pos)
        pos = m.end()
        if pos < len(text):
            if text[pos] != "-":
                raise ParseError(f"expected '-' between tokens, found {text[pos]!r}", pos)
            pos += 1
            if pos == len(text):
                raise ParseError("trailing '-'", pos)
    return ArchSpec(tuple(tokens))


def layer_names(spec, prefix=""):
    """Parameter-name stem for every token (``None`` for parameter-free ones)."""
    names = []
    counts = {"conv": 0, "fc": 0}
    for tok in spec:
        if isinstance(tok, ConvBlock):
            counts["conv"] += 1
            names.append(f"{prefix}conv{counts['conv']}")
        elif isinstance(tok, FC):
            counts["fc"] += 1
            names.append(f"{prefix}fc{counts['fc']}")
        elif isinstance(tok, STN):
            names.append(f"{prefix}stn")
        else:
            names.append(None)
    return names


def trace_shapes(spec, in_shape):
    """Per-sample output shape after every token, starting from ``in_shape``."""
    shape = tuple(in_shape)
    shapes = []
    for tok in spec:
        if isinstance(tok, ConvBlock):
            if len(shape) != 3:
                raise DimensionError(f"{tok.render()} needs a (C, H, W) input, got {shape}")
            _, H, W = shape
            shape = (tok.n, conv_output_size(H, tok.w, tok.s, tok.p), conv_output_size(W, tok.w, tok.s, tok.p))
        elif isinstance(tok, Pool):
            if len(shape) != 3 or tok.k > min(shape[1:]):
                raise DimensionError(f"{tok.render()} cannot pool shape {shape}")
            shape = (shape[0], (shape[1] - tok.k) // tok.k + 1, (shape[2] - tok.k) // tok.k + 1)
        elif isinstance(tok, FC):
            shape = (tok.n,)
        elif isinstance(tok, GAP):
            if len(shape) != 3:
                raise DimensionError(f"gap needs a (C, H, W) input, got {shape}")
            shape = (shape[0],)
        elif isinstance(tok, L2Norm):
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    return shapes


def param_rng(seed, name):
    """Generator keyed by seed and parameter name, so shared layers initialise identically."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def fan_in_uniform(seed, name, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return param_rng(seed, name).uniform(-bound, bound, size=shape).astype(get_dtype())


def init_sequence(spec, in_shape, seed, prefix=""):
    """Initial parameters and batchnorm buffers for a network without ``stn`` tokens."""
    dtype = get_dtype()
    params, buffers = {}, {}
    shape = tuple(in_shape)
    for tok, name, out_shape in zip(spec, layer_names(spec, prefix), trace_shapes(spec, in_shape)):
        if isinstance(tok, ConvBlock):
            c_in = shape[0]
            w_name = f"{name}.weight"
            params[w_name] = fan_in_uniform(seed, w_name, (tok.n, c_in, tok.w, tok.w), c_in * tok.w * tok.w)
            params[f"{name}.bias"] = np.zeros(tok.n, dtype)
            bn = _bn_name(name)
            params[f"{bn}.gamma"] = np.ones(tok.n, dtype)
            params[f"{bn}.beta"] = np.zeros(tok.n, dtype)
            buffers[f"{bn}.running_mean"] = np.zeros(tok.n, dtype)
            buffers[f"{bn}.running_var"] = np.ones(tok.n, dtype)
        elif isinstance(tok, FC):
            d_in = int(np.prod(shape))
            w_name = f"{name}.weight"
            params[w_name] = fan_in_uniform(seed, w_name, (d_in, tok.n), d_in)
            params[f"{name}.bias"] = np.zeros(tok.n, dtype)
        elif isinstance(tok, STN):
            raise ValueError("stn tokens are initialised by the model, not init_sequence")
        shape = out_shape
    return params, buffers


def _bn_name(conv_name):
    head, _, idx = conv_name.rpartition("conv")
    return f"{head}bn{idx}"


def forward_sequence(spec, params, buffers, x, train, prefix="", momentum=0.9):
    """Run a plain layer sequence; returns the output and the per-token caches."""
    caches = []
    for tok, name in zip(spec, layer_names(spec, prefix)):
        if isinstance(tok, ConvBlock):
            cp = layers.ConvParams(params[f"{name}.weight"], params[f"{name}.bias"], tok.s, tok.p)
            bn = _bn_name(name)
            bp = layers.BatchNormParams(
                params[f"{bn}.gamma"], params[f"{bn}.beta"],
                buffers[f"{bn}.running_mean"], buffers[f"{bn}.running_var"], momentum=momentum,
            )
            x, c_conv = layers.conv_forward(x, cp)
            x, c_relu = layers.relu_forward(x)
            x, c_bn = layers.batchnorm_forward(x, bp, train=train)
            caches.append((c_conv, c_relu, c_bn))
        elif isinstance(tok, Pool):
            x, c = layers.maxpool_forward(x, tok.k)
            caches.append(c)
        elif isinstance(tok, FC):
            x, c = layers.fc_forward(x, params[f"{name}.weight"], params[f"{name}.bias"])
            caches.append(c)
        elif isinstance(tok, GAP):
            x, c = layers.global_avgpool_forward(x)
            caches.append(c)
        elif isinstance(tok, L2Norm):
            in_shape = x.shape
            x, c = layers.l2norm_forward(x.reshape(x.shape[0], -1))
            caches.append((c, in_shape))
        else:
            raise ValueError(f"forward_sequence cannot run {tok.render()}")
    return x, caches


def backward_sequence(spec, params, dy, caches, prefix=""):
    """Backpropagate through :func:`forward_sequence`; returns (dx, grads)."""
    grads = {}
    for tok, name, cache in reversed(list(zip(spec, layer_names(spec, prefix), caches))):
        if isinstance(tok, ConvBlock):
            c_conv, c_relu, c_bn = cache
            bn = _bn_name(name)
            bp = layers.BatchNormParams(params[f"{bn}.gamma"], params[f"{bn}.beta"], None, None)
            cp = layers.ConvParams(params[f"{name}.weight"], params[f"{name}.bias"], tok.s, tok.p)
            dy, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = layers.batchnorm_backward(dy, c_bn, bp)
            dy = layers.relu_backward(dy, c_relu)
            dy, grads[f"{name}.weight"], grads[f"{name}.bias"] = layers.conv_backward(dy, c_conv, cp)
        elif isinstance(tok, Pool):
            dy = layers.maxpool_backward(dy, cache)
        elif isinstance(tok, FC):
            dy, grads[f"{name}.weight"], grads[f"{name}.bias"] = layers.fc_backward(
                dy, cache, params[f"{name}.weight"]
            )
        elif isinstance(tok, GAP):
            dy = layers.global_avgpool_backward(dy, cache)
        elif isinstance(tok, L2Norm):
            c, in_shape = cache
            dy = layers.l2norm_backward(dy, c).reshape(in_shape)
    return dy, grads
