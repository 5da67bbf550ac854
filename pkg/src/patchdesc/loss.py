"""Margin-based contrastive loss over descriptor pairs.

For a pair at Euclidean distance ``D`` with label ``l`` (1 = match)::

    L = 0.5 * l * D**2 + 0.5 * (1 - l) * max(0, m - D)**2
"""
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMarginError, DimensionError, DomainError

DIST_GUARD = 1e-12


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float

    def __post_init__(self):
        if not self.margin > 0:
            raise DegenerateMarginError(f"contrastive margin must be positive, got {self.margin}")


def pair_distance(f1, f2):
    """Euclidean distance between descriptors; row-wise for 2-d inputs."""
    f1 = np.asarray(f1)
    f2 = np.asarray(f2)
    if f1.shape != f2.shape:
        raise DimensionError(f"descriptor shapes differ: {f1.shape} vs {f2.shape}")
    diff = f1 - f2
    return np.sqrt(np.sum(diff * diff, axis=-1))


def contrastive_loss(D, l, m):
    """Per-pair loss; broadcasts over arrays of distances and labels."""
    D = np.asarray(D, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if np.any(D < 0):
        raise DomainError("distances must be non-negative")
    if not m > 0:
        raise DegenerateMarginError(f"contrastive margin must be positive, got {m}")
    hinge = np.maximum(0.0, m - D)
    out = 0.5 * l * D * D + 0.5 * (1.0 - l) * hinge * hinge
    return float(out) if out.ndim == 0 else out


def contrastive_loss_backward(f1, f2, l, m, scale=1.0):
    """Gradients of the loss w.r.t. both descriptors.

    ``f1``/``f2`` may be single vectors or (B, d) batches with a label per
    row; ``scale`` multiplies the result (``1/B`` for a batch mean).
    """
    f1 = np.asarray(f1)
    f2 = np.asarray(f2)
    diff = f1 - f2
    D = np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True))
    l = np.asarray(l, dtype=f1.dtype)
    if l.ndim and f1.ndim > 1:
        l = l.reshape(-1, 1)
    dL_dD = l * D - (1 - l) * np.maximum(0, m - D)
    df1 = (scale * dL_dD / np.maximum(D, DIST_GUARD)) * diff
    return df1.astype(f1.dtype), (-df1).astype(f1.dtype)


def batch_loss(f1, f2, labels, m):
    """Mean loss over a batch and the gradients of that mean."""
    D = pair_distance(f1, f2)
    loss = float(np.mean(contrastive_loss(D, labels, m)))
    df1, df2 = contrastive_loss_backward(f1, f2, labels, m, scale=1.0 / len(D))
    return loss, df1, df2, D


def estimate_margin(model, sample_pairs, batch_size=100):
    """Twice the mean descriptor distance over ``sample_pairs`` before training.

    ``sample_pairs`` is a sequence of ``(patch1, patch2)`` preprocessed
    arrays (each (1, H, W)) or a pair of stacked (N, 1, H, W) arrays.
    Positive and negative pairs are pooled.
    """
    from .model import describe

    p1, p2 = _stack_pairs(sample_pairs)
    if len(p1) == 0:
        raise ValueError("estimate_margin needs at least one pair")
    dists = []
    for start in range(0, len(p1), batch_size):
        d1 = describe(model, p1[start:start + batch_size])
        d2 = describe(model, p2[start:start + batch_size])
        dists.append(pair_distance(d1, d2))
    return margin_from_distances(np.concatenate(dists))


def margin_from_distances(distances):
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0:
        raise ValueError("margin estimate needs at least one distance")
    margin = 2.0 * float(np.mean(distances))
    if not margin > 0:
        raise DegenerateMarginError("all sampled pairs have identical descriptors; margin would be 0")
    return margin


def _stack_pairs(sample_pairs):
    if isinstance(sample_pairs, tuple) and len(sample_pairs) == 2 and getattr(sample_pairs[0], "ndim", 0) == 4:
        return sample_pairs
    pairs = list(sample_pairs)
    if not pairs:
        return np.empty((0,)), np.empty((0,))
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])
