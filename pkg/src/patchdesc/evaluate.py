"""Pair scoring and threshold metrics: FPR at a recall level, ROC, PR and histograms.

A pair is predicted to match when its descriptor distance is at or below
the threshold.  Curves are exact step functions over the distinct observed
distances, never interpolated.
"""
import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .model import describe
from .preprocess import IDENTITY_TAG, augment_patch

TABLE1_COLUMNS = (
    "yosemite->liberty",
    "yosemite->notredame",
    "notredame->liberty",
    "notredame->yosemite",
    "liberty->notredame",
    "liberty->yosemite",
)


@dataclass
class ScoredPairs:
    distances: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.distances.shape != self.labels.shape or self.distances.ndim != 1:
            raise ValueError("distances and labels must be 1-d and of equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    @property
    def positives(self):
        return self.distances[self.labels == 1]

    @property
    def negatives(self):
        return self.distances[self.labels == 0]

    def require_both_classes(self):
        if not (self.labels == 1).any() or not (self.labels == 0).any():
            raise ValueError("threshold metrics need at least one positive and one negative pair")


def score_pairs(model, pairs, store, preprocessor, batch_size=64):
    """Descriptor distance of every pair; each (patch, tag) is described once."""
    keys = {}
    for p in pairs:
        keys.setdefault((p.idx1, p.tag), len(keys))
        keys.setdefault((p.idx2, p.tag), len(keys))
    order = list(keys)
    x = preprocessor.apply(store.patches[[idx for idx, _ in order]])
    for k, (_, tag) in enumerate(order):
        if tag != IDENTITY_TAG:
            x[k] = augment_patch(x[k], tag)
    desc = describe(model, x, batch_size).astype(np.float64)
    a = np.array([keys[(p.idx1, p.tag)] for p in pairs], dtype=np.int64)
    b = np.array([keys[(p.idx2, p.tag)] for p in pairs], dtype=np.int64)
    dist = np.sqrt(np.sum((desc[a] - desc[b]) ** 2, axis=1))
    return ScoredPairs(dist, np.array([p.label for p in pairs], dtype=np.int64))


def _sweep(s):
    """Distinct thresholds with cumulative TP and FP counts at each (distance <= t)."""
    order = np.argsort(s.distances, kind="stable")
    d = s.distances[order]
    pos = s.labels[order] == 1
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    last = np.r_[d[1:] != d[:-1], True]  # last occurrence of each distinct distance
    return d[last], tp[last], fp[last]


def fpr_at_recall(s, recall_target=0.95):
    """False positive rate at the smallest threshold whose recall reaches ``recall_target``."""
    threshold = recall_threshold(s, recall_target)
    return float(np.count_nonzero(s.negatives <= threshold)) / len(s.negatives)


def recall_threshold(s, recall_target=0.95):
    """Smallest observed distance at which the true positive rate reaches ``recall_target``."""
    if not 0 < recall_target <= 1:
        raise ValueError(f"recall target must lie in (0, 1], got {recall_target}")
    s.require_both_classes()
    pos = np.sort(s.positives)
    n_pos = len(pos)
    # smallest k with k / n_pos >= target, using the same float comparison as a direct sweep
    k = max(1, min(n_pos, math.ceil(recall_target * n_pos)))
    while k > 1 and (k - 1) / n_pos >= recall_target:
        k -= 1
    while k < n_pos and k / n_pos < recall_target:
        k += 1
    return float(pos[k - 1])


def roc_curve(s):
    """Rows (threshold, tpr, fpr), starting from the sentinel (-inf, 0, 0)."""
    s.require_both_classes()
    t, tp, fp = _sweep(s)
    n_pos, n_neg = tp[-1], fp[-1]
    return np.column_stack([np.r_[-np.inf, t], np.r_[0, tp] / n_pos, np.r_[0, fp] / n_neg])


def pr_curve(s):
    """Rows (threshold, precision, recall) and the trapezoidal area over recall.

    The sentinel row (-inf, 1, 0) anchors the curve at zero recall.
    """
    s.require_both_classes()
    t, tp, fp = _sweep(s)
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    points = np.column_stack([np.r_[-np.inf, t], np.r_[1.0, precision], np.r_[0.0, recall]])
    auc = float(np.trapezoid(points[:, 1], points[:, 2]))
    return points, auc


@dataclass
class Histogram:
    edges: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def distance_histograms(s, bins=50):
    """Per-class counts over ``bins`` equal bins spanning [0, max distance]."""
    if bins < 1:
        raise ValueError("need at least one bin")
    top = float(s.distances.max()) if len(s) else 0.0
    rng = (0.0, top if top > 0 else 1.0)
    pos, edges = np.histogram(s.positives, bins=bins, range=rng)
    neg, _ = np.histogram(s.negatives, bins=bins, range=rng)
    return Histogram(edges, pos, neg)


def aggregate_means(results):
    """(mean, mean over the first four columns) of a 6-cell result table.

    ``results`` is a mapping keyed by :data:`TABLE1_COLUMNS` or a sequence
    already in that order.
    """
    if isinstance(results, dict):
        missing = [c for c in TABLE1_COLUMNS if c not in results]
        if missing:
            raise KeyError(f"missing result cells: {', '.join(missing)}")
        cells = [float(results[c]) for c in TABLE1_COLUMNS]
    else:
        cells = [float(v) for v in results]
        if len(cells) != len(TABLE1_COLUMNS):
            raise ValueError(f"expected {len(TABLE1_COLUMNS)} cells, got {len(cells)}")
    return float(np.mean(cells)), float(np.mean(cells[:4]))


def top_errors(s, n, recall_target=0.95):
    """Pair positions of the worst false positives and false negatives at the operating threshold.

    False positives are negatives at or below the threshold, closest first;
    false negatives are positives above it, farthest first.
    """
    t = recall_threshold(s, recall_target)
    idx = np.arange(len(s))
    fp = idx[(s.labels == 0) & (s.distances <= t)]
    fn = idx[(s.labels == 1) & (s.distances > t)]
    fp = fp[np.argsort(s.distances[fp], kind="stable")][:n]
    fn = fn[np.argsort(-s.distances[fn], kind="stable")][:n]
    return fp, fn


def match_descriptors(a, b, chunk_elems=4_000_000):
    """Nearest row of ``b`` for every row of ``a`` by Euclidean distance.

    Returns ``(indices, distances)``; ties go to the lower index of ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"descriptor sets of shapes {a.shape} and {b.shape} cannot be compared")
    if len(b) == 0:
        raise ValueError("cannot match against an empty descriptor set")
    rows = max(1, chunk_elems // max(1, b.size))
    idx = np.empty(len(a), dtype=np.int64)
    dist = np.empty(len(a))
    for start in range(0, len(a), rows):
        diff = a[start:start + rows, None, :] - b[None]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        idx[start:start + rows] = d.argmin(axis=1)
        dist[start:start + rows] = d[np.arange(len(d)), idx[start:start + rows]]
    return idx, dist


@dataclass
class EvalReport:
    fpr_at_95: float
    roc_points: np.ndarray
    pr_points: np.ndarray
    pr_auc: float
    histogram: Histogram
    metadata: dict = field(default_factory=dict)
    n_positive: int = 0
    n_negative: int = 0
    mean_positive: float = float("nan")
    mean_negative: float = float("nan")


def evaluate(s, bins=50, metadata=None):
    points, auc = pr_curve(s)
    return EvalReport(
        fpr_at_95=fpr_at_recall(s, 0.95),
        roc_points=roc_curve(s),
        pr_points=points,
        pr_auc=auc,
        histogram=distance_histograms(s, bins),
        metadata=dict(metadata or {}),
        n_positive=int((s.labels == 1).sum()),
        n_negative=int((s.labels == 0).sum()),
        mean_positive=float(s.positives.mean()),
        mean_negative=float(s.negatives.mean()),
    )


def _fmt(v):
    return repr(float(v))


def write_report(report, directory, comments=()):
    """Write roc.csv, pr.csv, hist.csv and summary.csv into ``directory``.

    ``comments`` (e.g. provenance) are written as leading ``#`` lines.
    """
    os.makedirs(directory, exist_ok=True)

    def dump(name, header, rows):
        with open(os.path.join(directory, name), "w", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    dump("roc.csv", ["threshold", "tpr", "fpr"], ([_fmt(v) for v in r] for r in report.roc_points))
    dump("pr.csv", ["threshold", "precision", "recall"], ([_fmt(v) for v in r] for r in report.pr_points))
    h = report.histogram
    dump("hist.csv", ["bin_low", "bin_high", "pos_count", "neg_count"],
         ([_fmt(h.edges[i]), _fmt(h.edges[i + 1]), int(h.positive[i]), int(h.negative[i])]
          for i in range(len(h.positive))))
    rows = [
        ["fpr_at_95", _fmt(report.fpr_at_95)],
        ["pr_auc", _fmt(report.pr_auc)],
        ["n_positive", report.n_positive],
        ["n_negative", report.n_negative],
        ["mean_positive_distance", _fmt(report.mean_positive)],
        ["mean_negative_distance", _fmt(report.mean_negative)],
    ]
    rows += [[f"meta.{k}", json.dumps(v, sort_keys=True)] for k, v in sorted(report.metadata.items())]
    dump("summary.csv", ["metric", "value"], rows)
