"""Patch stores, pair lists, batching and the synthetic patch dataset.

On disk a subset follows the layout of the multi-view stereo correspondence
distribution: ``patches*.bmp`` mosaics of 1024x1024 pixels, each holding
16x16 tiles of 64x64 patches in row-major order, plus ``info.txt`` with one
line per patch whose first field is the 3D point id.  Pair lists are text
files with whitespace-separated fields; fields 1 and 4 are patch indices,
fields 2 and 5 the point ids.
"""
import glob
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import IngestionError, IntegrityError
from .preprocess import IDENTITY_TAG, augment_patch

PATCH = 64
MOSAIC = 1024
TILES = MOSAIC // PATCH  # per side
PER_MOSAIC = TILES * TILES


@dataclass
class PatchStore:
    name: str
    patches: np.ndarray  # (N, 64, 64) uint8
    point_ids: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.patches) != len(self.point_ids):
            raise IngestionError("every patch needs exactly one point id")

    def __len__(self):
        return len(self.patches)


class PatchPair(NamedTuple):
    idx1: int
    idx2: int
    label: int
    tag: object = IDENTITY_TAG


@dataclass
class PairList:
    pairs: list
    role: str = "train"
    declared_size: int = None

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError(f"pair list role must be 'train' or 'test', got {self.role!r}")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def labels(self):
        return np.array([p.label for p in self.pairs], dtype=np.int64)

    def patch_indices(self):
        """Sorted unique patch indices referenced by the list."""
        idx = [p.idx1 for p in self.pairs] + [p.idx2 for p in self.pairs]
        return np.unique(np.array(idx, dtype=np.int64))


def tile_location(i):
    """(mosaic number, tile row, tile column) of patch ``i``."""
    return i // PER_MOSAIC, (i % PER_MOSAIC) // TILES, i % TILES


def load_patch_store(directory, name=None):
    """Read the mosaics and ``info.txt`` of one subset directory."""
    if not os.path.isdir(directory):
        raise IngestionError(f"dataset directory {directory} does not exist")
    info = os.path.join(directory, "info.txt")
    if not os.path.exists(info):
        raise IngestionError(f"missing info file {info}")
    mosaics = sorted(glob.glob(os.path.join(directory, "patches*.bmp")))
    if not mosaics:
        raise IngestionError(f"no patches*.bmp mosaics in {directory}")
    with open(info) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    try:
        point_ids = np.array([int(f[0]) for f in lines], dtype=np.int64)
    except ValueError as exc:
        raise IngestionError(f"{info}: malformed line ({exc})") from None
    n = len(point_ids)
    capacity = len(mosaics) * PER_MOSAIC
    if n > capacity or n <= capacity - PER_MOSAIC:
        raise IngestionError(
            f"{info} lists {n} patches but {len(mosaics)} mosaic(s) hold {capacity - PER_MOSAIC + 1}..{capacity}"
        )
    patches = np.empty((n, PATCH, PATCH), dtype=np.uint8)
    for m, path in enumerate(mosaics):
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
        if arr.shape != (MOSAIC, MOSAIC):
            raise IngestionError(f"{path}: mosaic is {arr.shape[1]}x{arr.shape[0]}, expected 1024x1024")
        tiles = arr.reshape(TILES, PATCH, TILES, PATCH).transpose(0, 2, 1, 3).reshape(PER_MOSAIC, PATCH, PATCH)
        start = m * PER_MOSAIC
        count = min(PER_MOSAIC, n - start)
        patches[start:start + count] = tiles[:count]
    return PatchStore(name or os.path.basename(os.path.normpath(directory)), patches, point_ids)


def write_patch_store(store, directory):
    """Write ``store`` in the on-disk layout read by :func:`load_patch_store`."""
    os.makedirs(directory, exist_ok=True)
    n = len(store)
    for m in range(max(1, -(-n // PER_MOSAIC))):
        tiles = np.zeros((PER_MOSAIC, PATCH, PATCH), dtype=np.uint8)
        chunk = store.patches[m * PER_MOSAIC:(m + 1) * PER_MOSAIC]
        tiles[:len(chunk)] = chunk
        mosaic = tiles.reshape(TILES, TILES, PATCH, PATCH).transpose(0, 2, 1, 3).reshape(MOSAIC, MOSAIC)
        Image.fromarray(mosaic).save(os.path.join(directory, f"patches{m:04d}.bmp"))
    with open(os.path.join(directory, "info.txt"), "w") as fh:
        for pid in store.point_ids:
            fh.write(f"{pid} 0\n")


def load_pair_list(path, store, role="train"):
    """Read a match file; labels come from point-id equality, checked against the store."""
    if not os.path.exists(path):
        raise IngestionError(f"pair list {path} does not exist")
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 5:
                raise IngestionError(f"{path}:{lineno}: expected at least 5 fields, got {len(fields)}")
            try:
                i1, pid1, i2, pid2 = int(fields[0]), int(fields[1]), int(fields[3]), int(fields[4])
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: non-integer index or point id") from None
            for idx in (i1, i2):
                if not 0 <= idx < len(store):
                    raise IntegrityError(f"{path}:{lineno}: patch index {idx} outside store of {len(store)}")
            if store.point_ids[i1] != pid1 or store.point_ids[i2] != pid2:
                raise IntegrityError(f"{path}:{lineno}: point ids disagree with the store's info file")
            pairs.append(PatchPair(i1, i2, int(pid1 == pid2)))
    return PairList(pairs, role, declared_size=len(pairs))


def write_pair_list(pairs, store, path):
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(f"{p.idx1} {store.point_ids[p.idx1]} 0 {p.idx2} {store.point_ids[p.idx2]} 0\n")


def check_labels(pairs, store):
    """Raise if any pair label disagrees with point-id equality."""
    for p in pairs:
        if p.label != int(store.point_ids[p.idx1] == store.point_ids[p.idx2]):
            raise IntegrityError(f"pair ({p.idx1}, {p.idx2}) has label {p.label} but point ids say otherwise")


# -- batching ---------------------------------------------------------------

class PairBatch(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    ids: np.ndarray  # positions of the pairs in the pair list


def batch_order(n, batch_size, shuffle_seed=None, epoch=0, train=True):
    """Index arrays for each batch; training drops the final short batch."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    stop = (n // batch_size) * batch_size if train else n
    return [order[i:i + batch_size] for i in range(0, stop, batch_size)]


def batch_iter(pairs, store, batch_size, shuffle_seed=None, epoch=0, train=True, preprocessor=None):
    """Yield :class:`PairBatch` tensors; patches go through ``preprocessor`` then augmentation."""
    for ids in batch_order(len(pairs), batch_size, shuffle_seed, epoch, train):
        sel = [pairs[i] for i in ids]
        raw1 = store.patches[[p.idx1 for p in sel]]
        raw2 = store.patches[[p.idx2 for p in sel]]
        if preprocessor is not None:
            x1, x2 = preprocessor.apply(raw1), preprocessor.apply(raw2)
        else:
            x1, x2 = raw1[:, None].astype(np.float32), raw2[:, None].astype(np.float32)
        for k, p in enumerate(sel):
            if p.tag != IDENTITY_TAG:
                x1[k] = augment_patch(x1[k], p.tag)
                x2[k] = augment_patch(x2[k], p.tag)
        yield PairBatch(x1, x2, np.array([p.label for p in sel], dtype=np.int64), np.asarray(ids))


@dataclass
class PairDataset:
    """A pair list bound to its patch store and preprocessing."""

    store: PatchStore
    pairs: PairList
    preprocessor: object = None

    @property
    def role(self):
        return self.pairs.role

    def __len__(self):
        return len(self.pairs)

    def batches(self, batch_size, shuffle_seed=None, epoch=0, train=True):
        return batch_iter(self.pairs, self.store, batch_size, shuffle_seed, epoch, train, self.preprocessor)


# -- synthetic data ---------------------------------------------------------

def _texture(rng, size):
    """Band-limited random texture in [0, 1] with a few sharp structures on top."""
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), rng.uniform(2.0, 4.0))
    field += 0.5 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0) * field.std() / 0.2
    yy, xx = np.mgrid[:size, :size]
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.25, 0.75, 2) * size
        r = rng.uniform(4, 12)
        field += rng.choice([-1, 1]) * field.std() * 2 * (np.hypot(yy - cy, xx - cx) < r)
    angle = rng.uniform(0, np.pi)
    field += field.std() * 1.5 * ((np.cos(angle) * (xx - size / 2) + np.sin(angle) * (yy - size / 2)) > rng.uniform(-8, 8))
    field -= field.min()
    return field / max(field.max(), 1e-12)


def _warp(img, rng, max_rot, max_scale, max_shift):
    size = img.shape[0]
    theta = np.deg2rad(rng.uniform(-max_rot, max_rot))
    scale = np.exp(rng.uniform(-max_scale, max_scale))
    shift = rng.uniform(-max_shift, max_shift, 2)
    c, s = np.cos(theta) / scale, np.sin(theta) / scale
    matrix = np.array([[c, -s], [s, c]])
    centre = (size - 1) / 2.0
    offset = centre - matrix @ (centre + shift)
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="reflect")


def make_synthetic_dataset(n_points, patches_per_point, seed, train_fraction=0.5, pairs_per_point=1,
                           noise=6.0, warp=(4.0, 0.04, 1.0), contrast_jitter=0.0, geometric_jitter=None):
    """Procedural stand-in for a patch-matching subset.

    Every 3D point gets its own texture; its patches are small random warps
    of that texture plus pixel noise.  ``contrast_jitter`` (0..1) applies a
    random per-patch gamma and gain; ``geometric_jitter`` =
    (degrees, log-scale, pixels) adds larger per-patch rotation, scale and
    translation.  Points are split into disjoint train and test sets; each
    point contributes ``pairs_per_point`` positive and as many negative
    pairs.  Returns ``(store, train_pairs, test_pairs)``.
    """
    if n_points < 2:
        raise ValueError("need at least two points to form negative pairs")
    if patches_per_point < 2:
        raise ValueError("need at least two patches per point to form positive pairs")
    rng = np.random.default_rng(seed)
    canvas = PATCH + 32
    crop = slice(16, 16 + PATCH)
    patches = np.empty((n_points * patches_per_point, PATCH, PATCH), dtype=np.uint8)
    point_ids = np.repeat(np.arange(n_points, dtype=np.int64), patches_per_point)
    for pt in range(n_points):
        tex = _texture(rng, canvas)
        lo = rng.uniform(20, 90)
        hi = rng.uniform(160, 235)
        for j in range(patches_per_point):
            img = _warp(tex, rng, *warp)
            if geometric_jitter is not None:
                img = _warp(img, rng, *geometric_jitter)
            img = img[crop, crop]
            if contrast_jitter:
                gamma = np.exp(rng.uniform(-contrast_jitter, contrast_jitter) * 1.2)
                img = np.clip(img, 0, 1) ** gamma
                a, b = sorted(rng.uniform(0, 1, 2) * contrast_jitter * [0.6, 0.6] + [0, 1 - 0.6 * contrast_jitter])
                img = a + (b - a) * img
            pix = lo + (hi - lo) * img + rng.normal(0, noise, img.shape)
            patches[pt * patches_per_point + j] = np.clip(np.round(pix), 0, 255).astype(np.uint8)
    store = PatchStore("synthetic", patches, point_ids)

    order = rng.permutation(n_points)
    n_train = max(2, int(round(train_fraction * n_points)))
    if n_points - n_train < 2:
        n_train = n_points - 2 if n_points >= 4 else n_points
    train_pts = np.sort(order[:n_train])
    test_pts = np.sort(order[n_train:]) if n_points - n_train >= 2 else train_pts
    return store, _pairs_for(train_pts, patches_per_point, pairs_per_point, rng, "train"), \
        _pairs_for(test_pts, patches_per_point, pairs_per_point, rng, "test")


def _pairs_for(points, per_point, pairs_per_point, rng, role):
    pairs = []
    for pt in points:
        for _ in range(pairs_per_point):
            a, b = rng.choice(per_point, 2, replace=False)
            pairs.append(PatchPair(int(pt * per_point + a), int(pt * per_point + b), 1))
            other = pt
            while other == pt:
                other = rng.choice(points)
            pairs.append(PatchPair(int(pt * per_point + rng.integers(per_point)),
                                   int(other * per_point + rng.integers(per_point)), 0))
    pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    return PairList(pairs, role, declared_size=len(pairs))
