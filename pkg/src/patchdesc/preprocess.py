"""Patch intensity pipeline and the rotation/flip augmentation group.

The order is fixed: histogram equalisation (optional), then mean/std
normalisation with statistics of the training split, then augmentation at
batch-assembly time.
"""
import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import RoleError
from .tensor import get_dtype

ROTATIONS = (0, 90, 180, 270)
FLIPS = ("none", "horizontal", "vertical")


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"normalisation std must be positive, got {self.std}")

    def to_dict(self):
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["mean"]), float(d["std"]))


@dataclass(frozen=True)
class AugmentTag:
    rotation: int = 0
    flip: str = "none"

    def __post_init__(self):
        if self.rotation not in ROTATIONS or self.flip not in FLIPS:
            raise ValueError(f"invalid augmentation tag {self.rotation}/{self.flip}")

    def __str__(self):
        return f"rot{self.rotation}-{self.flip}"


IDENTITY_TAG = AugmentTag()
ALL_TAGS = tuple(AugmentTag(r, f) for r, f in itertools.product(ROTATIONS, FLIPS))
# rotating by r and flipping vertically equals rotating by r+180 and flipping
# horizontally, so the 12 tags realise only the 8 symmetries of the square
DIHEDRAL_TAGS = tuple(AugmentTag(r, f) for r, f in itertools.product(ROTATIONS, ("none", "horizontal")))


class PixelPair(NamedTuple):
    p1: np.ndarray
    p2: np.ndarray
    label: int


def hist_equalize(patch):
    """Spread an 8-bit patch's gray levels over 0..255 through its cumulative histogram."""
    patch = np.asarray(patch)
    if patch.dtype != np.uint8:
        raise TypeError(f"histogram equalisation expects uint8 patches, got {patch.dtype}")
    hist = np.bincount(patch.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    n = patch.size
    cdf_min = cdf[hist.nonzero()[0][0]]
    if cdf_min == n:
        return patch.copy()
    lut = np.round((cdf - cdf_min) / (n - cdf_min) * 255.0)
    return np.clip(lut, 0, 255).astype(np.uint8)[patch]


def equalize_all(patches):
    return np.stack([hist_equalize(p) for p in patches]) if len(patches) else np.asarray(patches)


def compute_norm_stats(patches, chunk=4096):
    """Population mean/std over every pixel of ``patches`` (iterable of uint8 arrays).

    Integer accumulation makes the result independent of order and chunking.
    """
    total = 0
    total_sq = 0
    count = 0
    batch = []

    def flush():
        nonlocal total, total_sq, count
        if batch:
            arr = np.concatenate([np.asarray(b, dtype=np.int64).ravel() for b in batch])
            total += int(arr.sum())
            total_sq += int((arr * arr).sum())
            count += arr.size
            batch.clear()

    for p in patches:
        batch.append(p)
        if len(batch) >= chunk:
            flush()
    flush()
    if count == 0:
        raise ValueError("cannot compute normalisation statistics of an empty patch set")
    spread = count * total_sq - total * total
    if spread <= 0:
        raise ValueError("training patches have zero intensity variance")
    return NormStats(total / count, float(np.sqrt(spread)) / count)


def normalize(patch, stats):
    """(x - mean) / std as a (1, H, W) array of the current precision."""
    x = (np.asarray(patch, dtype=np.float64) - stats.mean) / stats.std
    return x.astype(get_dtype())[None] if x.ndim == 2 else x.astype(get_dtype())


def denormalize(x, stats):
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean


def augment_patch(patch, tag):
    """Rotate counter-clockwise by ``tag.rotation`` degrees, then flip.

    Works on the last two axes, so (H, W), (1, H, W) and batches are fine.
    """
    out = np.rot90(patch, tag.rotation // 90, axes=(-2, -1))
    if tag.flip == "horizontal":
        out = out[..., ::-1]
    elif tag.flip == "vertical":
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def augment(pair, tag):
    """Apply one tag to both patches of a :class:`PixelPair`; the label is kept."""
    return PixelPair(augment_patch(pair.p1, tag), augment_patch(pair.p2, tag), pair.label)


def expand_training_set(pairs, tags=ALL_TAGS):
    """Every pair under every tag, pair-major; the identity tag comes first for each pair.

    ``pairs`` hold a ``tag`` field (see :class:`patchdesc.data.PatchPair`).
    """
    tags = list(tags)
    if IDENTITY_TAG in tags:
        tags.remove(IDENTITY_TAG)
        tags.insert(0, IDENTITY_TAG)
    return [pair._replace(tag=tag) for pair in pairs for tag in tags]


@dataclass
class Preprocessor:
    """Equalise (optionally) and normalise raw uint8 patches."""

    hist_eq: bool = False
    stats: NormStats = None

    @classmethod
    def fit(cls, patches, hist_eq=False):
        """Statistics are taken after equalisation, i.e. on what the network sees."""
        patches = np.asarray(patches)
        source = equalize_all(patches) if hist_eq else patches
        return cls(hist_eq, compute_norm_stats(source))

    @classmethod
    def fit_pairs(cls, pairs, store, hist_eq=False):
        """Fit on every patch referenced by a training pair list."""
        if getattr(pairs, "role", "train") != "train":
            raise RoleError("normalisation statistics must come from the training split only")
        return cls.fit(store.patches[pairs.patch_indices()], hist_eq)

    def apply(self, patches):
        """(N, H, W) uint8 to (N, 1, H, W) normalised floats."""
        if self.stats is None:
            raise ValueError("preprocessor has no normalisation statistics; call fit first")
        patches = np.asarray(patches)
        if patches.ndim == 2:
            patches = patches[None]
        if self.hist_eq:
            patches = equalize_all(patches)
        x = (patches.astype(np.float64) - self.stats.mean) / self.stats.std
        return x.astype(get_dtype())[:, None]

    def to_dict(self):
        return {"hist_eq": self.hist_eq, "stats": None if self.stats is None else self.stats.to_dict()}

    @classmethod
    def from_dict(cls, d):
        stats = d.get("stats")
        return cls(bool(d.get("hist_eq", False)), NormStats.from_dict(stats) if stats else None)
