"""Siamese descriptor networks built from architecture strings.

Both branches of the Siamese pair run through the single parameter set of
a :class:`Model`; descriptors of the two patches of a pair are computed in
one batched pass, so branch weights cannot diverge.
"""
from dataclasses import dataclass, field

import numpy as np

from . import container, stn
from .arch import (
    ArchSpec, ConvBlock, FC, L2Norm, Pool, STN, backward_sequence, forward_sequence,
    init_sequence, parse_arch, trace_shapes,
)
from .errors import DimensionError, ModelFormatError
from .loss import batch_loss
from .tensor import get_dtype

CNN7_PAPER = (
    "convBlock[32,3,1,1]-convBlock[64,3,1,1]-pool[2]-convBlock[64,3,1,1]-convBlock[64,3,1,1]-pool[2]-"
    "convBlock[128,3,1,1]-convBlock[128,3,1,1]-pool[3]-convBlock[128,3,1,1]-L2norm"
)
# global average pooling reduces the final 128x5x5 map to a 128-d descriptor
CNN7 = CNN7_PAPER.replace("-L2norm", "-gap-L2norm")
CNN7STN = "stn-" + CNN7
ARCHITECTURES = {"cnn7": CNN7, "cnn7stn": CNN7STN}

PATCH_SHAPE = (1, 64, 64)


def resolve_arch(name_or_string):
    """Accept a built-in name (``cnn7``, ``cnn7stn``) or an architecture string."""
    if isinstance(name_or_string, ArchSpec):
        return name_or_string
    return parse_arch(ARCHITECTURES.get(name_or_string, name_or_string))


@dataclass
class Model:
    spec: ArchSpec
    params: dict
    buffers: dict
    input_shape: tuple = PATCH_SHAPE
    mode: str = "train"
    metadata: dict = field(default_factory=dict)

    @property
    def has_stn(self):
        return bool(self.spec.tokens) and isinstance(self.spec.tokens[0], STN)

    @property
    def body(self):
        """The architecture after the optional leading spatial transformer."""
        return ArchSpec(self.spec.tokens[1:]) if self.has_stn else self.spec

    @property
    def descriptor_dim(self):
        shape = trace_shapes(self.body, self.input_shape)[-1]
        return int(np.prod(shape))

    def eval(self):
        self.mode = "eval"
        return self

    def train(self):
        self.mode = "train"
        return self

    def copy(self):
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()},
                     tuple(self.input_shape), self.mode, dict(self.metadata))

    def astype(self, dtype):
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()},
                     {k: v.astype(dtype) for k, v in self.buffers.items()},
                     tuple(self.input_shape), self.mode, dict(self.metadata))


def _validate(spec):
    stn_at = [i for i, t in enumerate(spec.tokens) if isinstance(t, STN)]
    if stn_at and stn_at != [0]:
        raise ValueError("a spatial transformer is only supported as the first layer")


def init_model(spec, seed=0, input_shape=PATCH_SHAPE):
    """Fresh model with fan-in scaled uniform weights, zero biases and identity batchnorm.

    Initialisation is keyed by parameter name, so the shared part of
    ``cnn7`` and ``cnn7stn`` is identical for the same seed.
    """
    spec = resolve_arch(spec)
    _validate(spec)
    model = Model(spec, {}, {}, tuple(input_shape))
    if model.has_stn:
        p, b = stn.init_localisation(input_shape, seed)
        model.params.update(p)
        model.buffers.update(b)
    p, b = init_sequence(model.body, input_shape, seed)
    model.params.update(p)
    model.buffers.update(b)
    return model


def _check_input(model, x):
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise DimensionError(f"expected patches of shape (B, {', '.join(map(str, model.input_shape))}), got {x.shape}")
    return x


def forward(model, x, train=None, momentum=0.9):
    """Descriptors for a batch plus the caches needed by :func:`backward`."""
    x = _check_input(model, np.asarray(x, dtype=next(iter(model.params.values())).dtype))
    train = model.mode == "train" if train is None else train
    stn_cache = None
    if model.has_stn:
        x, stn_cache = stn.stn_forward(x, model.params, model.buffers, train, momentum=momentum)
    y, caches = forward_sequence(model.body, model.params, model.buffers, x, train, momentum=momentum)
    return y, (stn_cache, caches)


def backward(model, dy, caches):
    """Parameter gradients (and the input gradient) for a :func:`forward` call."""
    stn_cache, body_caches = caches
    dx, grads = backward_sequence(model.body, model.params, dy, body_caches)
    if stn_cache is not None:
        dx, stn_grads = stn.stn_backward(dx, stn_cache, model.params)
        grads.update(stn_grads)
    return dx, grads


def describe(model, patches, batch_size=64):
    """Eval-mode descriptors for a (B, 1, H, W) or (B, H, W) patch batch."""
    patches = _check_input(model, np.asarray(patches))
    out = []
    for start in range(0, len(patches), batch_size):
        y, _ = forward(model, patches[start:start + batch_size], train=False)
        out.append(y)
    if not out:
        return np.zeros((0, model.descriptor_dim), dtype=get_dtype())
    return np.concatenate(out)


def siamese_forward_backward(model, x1, x2, labels, margin):
    """Mean contrastive loss of a pair batch and its gradients w.r.t. the shared parameters.

    Returns ``(loss, grads, distances)``.
    """
    B = len(x1)
    if len(x2) != B or len(labels) != B:
        raise DimensionError("pair batch members and labels must have equal length")
    y, caches = forward(model, np.concatenate([x1, x2]), train=True)
    loss, df1, df2, dist = batch_loss(y[:B], y[B:], np.asarray(labels), margin)
    _, grads = backward(model, np.concatenate([df1, df2]), caches)
    return loss, grads, dist


def calibrate_batchnorm(model, patches, batch_size=64):
    """Set every batchnorm running statistic to its average over ``patches``.

    Weights are untouched.  Statistics are averaged over training-mode
    batches, matching what the network sees during training.
    """
    patches = _check_input(model, np.asarray(patches))
    n_batches = max(1, len(patches) // batch_size)
    for k in range(n_batches):
        chunk = patches[k * batch_size:(k + 1) * batch_size] if k < n_batches - 1 else patches[k * batch_size:]
        # momentum k/(k+1) turns the running update into a cumulative mean
        forward(model, chunk, train=True, momentum=k / (k + 1))
    return model


# -- persistence ------------------------------------------------------------

def model_tensors(model):
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    tensors.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    return tensors


def model_from_parts(arch, mode, metadata, tensors):
    spec = parse_arch(arch)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer/")}
    input_shape = tuple(metadata.get("input_shape", PATCH_SHAPE))
    meta = {k: v for k, v in metadata.items() if k not in ("input_shape", "kind")}
    model = Model(spec, params, buffers, input_shape, mode, meta)
    expected = init_model(spec, 0, input_shape)
    for name, value in {**expected.params, **expected.buffers}.items():
        got = params.get(name, buffers.get(name))
        if got is None or got.shape != value.shape:
            raise ModelFormatError(f"tensor {name!r} missing or mis-shaped for architecture {arch}")
    return model


def save_model(model, path, extra_tensors=None, extra_metadata=None):
    metadata = dict(model.metadata)
    metadata["input_shape"] = list(model.input_shape)
    metadata.setdefault("kind", "model")
    if extra_metadata:
        metadata.update(extra_metadata)
    tensors = model_tensors(model)
    if extra_tensors:
        tensors.update(extra_tensors)
    container.write_container(path, model.spec.render(), model.mode, metadata, tensors)


def load_model(path):
    arch, mode, metadata, tensors = container.read_container(path)
    return model_from_parts(arch, mode, metadata, tensors)


__all__ = [
    "ARCHITECTURES", "CNN7", "CNN7STN", "CNN7_PAPER", "ConvBlock", "FC", "L2Norm", "Model", "Pool",
    "backward", "calibrate_batchnorm", "describe", "forward", "init_model", "load_model",
    "resolve_arch", "save_model", "siamese_forward_backward",
]
