import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchdesc.data import PatchPair, PatchStore
from patchdesc.errors import DimensionError
from patchdesc.evaluate import (
    TABLE1_COLUMNS, ScoredPairs, aggregate_means, distance_histograms, evaluate, fpr_at_recall,
    match_descriptors, pr_curve, roc_curve, score_pairs, top_errors, write_report,
)
from patchdesc.model import calibrate_batchnorm, describe, init_model
from patchdesc.preprocess import AugmentTag, Preprocessor

SMALL = "convBlock[4,5,2,2]-pool[2]-convBlock[8,3,2,1]-pool[2]-gap-L2norm"


# -- brute-force oracles: every candidate threshold tried, counts taken directly --

def brute_fpr(d, l, target):
    P, N = sum(l), len(l) - sum(l)
    for t in sorted(set(d)):
        tp = sum(1 for di, li in zip(d, l) if li == 1 and di <= t)
        if tp / P >= target:
            return sum(1 for di, li in zip(d, l) if li == 0 and di <= t) / N
    raise AssertionError("unreachable")


def brute_pr(d, l):
    P = sum(l)
    rows = [(1.0, 0.0)]
    for t in sorted(set(d)):
        tp = sum(1 for di, li in zip(d, l) if li == 1 and di <= t)
        fp = sum(1 for di, li in zip(d, l) if li == 0 and di <= t)
        rows.append((tp / (tp + fp), tp / P))
    auc = 0.0
    for (p0, r0), (p1, r1) in zip(rows, rows[1:]):
        auc += (r1 - r0) * (p0 + p1) / 2
    return rows, auc


scored = st.integers(2, 1000).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 40), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


def test_fpr_worked_example():
    d = [0.1] * 10 + [0.05] * 10 + [0.5] * 10
    l = [1] * 10 + [0] * 20
    assert fpr_at_recall(ScoredPairs(d, l)) == 0.5


def test_fpr_extremes():
    assert fpr_at_recall(ScoredPairs([0.1, 0.2, 0.3, 0.4], [1, 1, 0, 0])) == 0.0
    assert fpr_at_recall(ScoredPairs([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1])) == 1.0


def test_fpr_errors():
    s = ScoredPairs([0.1, 0.2], [1, 0])
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            fpr_at_recall(s, bad)
    with pytest.raises(ValueError):
        fpr_at_recall(ScoredPairs([0.1, 0.2], [1, 1]))
    with pytest.raises(ValueError):
        ScoredPairs([0.1, 0.2], [1, 2])


@settings(max_examples=80, deadline=None)
@given(scored, st.sampled_from([0.95, 0.5, 1.0, 0.3, 0.999]))
def test_fpr_matches_brute_force(data, target):
    d, l = data
    d = [x / 7 for x in d]
    assert fpr_at_recall(ScoredPairs(d, l), target) == brute_fpr(d, l, target)


@settings(max_examples=60, deadline=None)
@given(scored)
def test_pr_matches_brute_force(data):
    d, l = data
    d = [x / 3 for x in d]
    points, auc = pr_curve(ScoredPairs(d, l))
    rows, ref_auc = brute_pr(d, l)
    assert [tuple(r) for r in points[:, 1:]] == rows
    assert auc == pytest.approx(ref_auc, abs=1e-12)
    assert 0 <= auc <= 1


def test_six_pair_table():
    # distances 1..6, labels + + - + - -; hand-enumerated
    s = ScoredPairs([1, 2, 3, 4, 5, 6], [1, 1, 0, 1, 0, 0])
    points, auc = pr_curve(s)
    np.testing.assert_allclose(points[:, 1], [1, 1, 1, 2 / 3, 3 / 4, 3 / 5, 1 / 2])
    np.testing.assert_allclose(points[:, 2], [0, 1 / 3, 2 / 3, 2 / 3, 1, 1, 1])
    # area: two unit-precision thirds, then a step from 2/3 to 3/4 over the last third
    assert auc == pytest.approx(2 / 3 + (2 / 3 + 3 / 4) / 2 / 3)


def test_perfect_separation_gives_unit_auc():
    assert pr_curve(ScoredPairs([0.1, 0.2, 0.9, 1.0], [1, 1, 0, 0]))[1] == 1.0


@pytest.mark.parametrize("prevalence", [0.5, 0.3])
def test_random_scores_give_prevalence_auc(prevalence):
    r = np.random.default_rng(11)
    n = 20000
    s = ScoredPairs(r.random(n), (r.random(n) < prevalence).astype(int))
    assert pr_curve(s)[1] == pytest.approx(prevalence, abs=0.05)


@settings(max_examples=40, deadline=None)
@given(scored)
def test_roc_and_pr_share_recall_axis(data):
    s = ScoredPairs(*data)
    roc = roc_curve(s)
    pr, _ = pr_curve(s)
    np.testing.assert_array_equal(roc[:, 0], pr[:, 0])
    np.testing.assert_array_equal(roc[:, 1], pr[:, 2])
    assert np.all(np.diff(roc[1:, 0]) > 0)
    assert np.all(np.diff(roc[:, 1]) >= 0) and np.all(np.diff(roc[:, 2]) >= 0)
    assert roc[-1, 1] == 1 and roc[-1, 2] == 1


@settings(max_examples=40, deadline=None)
@given(scored, st.integers(1, 5))
def test_far_negatives_never_raise_fpr(data, extra):
    d, l = data
    before = fpr_at_recall(ScoredPairs(d, l))
    after = fpr_at_recall(ScoredPairs(d + [100] * extra, l + [0] * extra))
    assert after <= before


@settings(max_examples=40, deadline=None)
@given(scored, st.integers(1, 30))
def test_histogram_counts_sum_to_class_sizes(data, bins):
    s = ScoredPairs(*data)
    h = distance_histograms(s, bins)
    assert len(h.edges) == bins + 1 and h.edges[0] == 0 and h.edges[-1] == max(s.distances)
    assert h.positive.sum() == len(s.positives) and h.negative.sum() == len(s.negatives)


def test_histogram_constant_distances():
    h = distance_histograms(ScoredPairs([0.7] * 5, [1, 0, 1, 0, 0]), 10)
    assert np.count_nonzero(h.positive) == 1 and np.count_nonzero(h.negative) == 1
    with pytest.raises(ValueError):
        distance_histograms(ScoredPairs([0.7], [1]), 0)


def test_two_bin_split_at_median(rng):
    x = rng.random(50)
    x[0] = 0.0
    d = np.r_[x, 2 - x, 1.0]  # symmetric about 1, so the median sits at half the range
    l = rng.integers(0, 2, len(d))
    h = distance_histograms(ScoredPairs(d, l), 2)
    mid = h.edges[1]
    assert mid == np.median(d) == 1.0
    assert h.positive.tolist() == [np.sum((d < mid) & (l == 1)), np.sum((d >= mid) & (l == 1))]
    assert h.negative.tolist() == [np.sum((d < mid) & (l == 0)), np.sum((d >= mid) & (l == 0))]


def test_aggregate_means_on_published_row():
    row = (15.19, 8.36, 12.20, 14.72, 6.93, 15.86)
    mean, mean14 = aggregate_means(row)
    assert mean == pytest.approx(73.26 / 6)
    assert round(mean, 2) == 12.21
    assert mean14 == pytest.approx(12.6175)
    assert round(mean14, 2) == 12.62  # the printed 12.74 does not follow from the cells
    assert aggregate_means(dict(zip(TABLE1_COLUMNS, row))) == (mean, mean14)


def test_aggregate_means_properties():
    assert aggregate_means([3.5] * 6) == (3.5, 3.5)
    a = aggregate_means([1, 2, 3, 4, 5, 6])
    b = aggregate_means([1, 2, 3, 4, 6, 5])
    assert a == pytest.approx(b)
    with pytest.raises(KeyError):
        aggregate_means(dict(zip(TABLE1_COLUMNS[:5], range(5))))
    with pytest.raises(ValueError):
        aggregate_means([1, 2, 3])


def test_top_errors():
    s = ScoredPairs([0.1, 0.2, 0.9, 0.15, 0.8, 0.05], [1, 1, 1, 0, 0, 0])
    fp, fn = top_errors(s, 5, recall_target=2 / 3)
    # threshold at 0.2: negatives 5 (0.05) and 3 (0.15) fall below it, positive 2 above
    assert fp.tolist() == [5, 3] and fn.tolist() == [2]


def test_match_descriptors_against_exhaustive_search(rng):
    a = rng.standard_normal((50, 8))
    b = rng.standard_normal((50, 8))
    b[7] = b[3]  # a duplicate row: ties must go to the lower index
    a[0] = b[3]
    idx, dist = match_descriptors(a, b, chunk_elems=64)
    for i in range(50):
        ds = [np.linalg.norm(a[i] - b[j]) for j in range(50)]
        best = min(range(50), key=lambda j: (ds[j], j))
        assert idx[i] == best and dist[i] == pytest.approx(ds[best])
    assert idx[0] == 3 and dist[0] == 0
    same, d0 = match_descriptors(a, a)
    assert same.tolist() == list(range(50)) and np.all(d0 == 0)
    with pytest.raises(DimensionError):
        match_descriptors(a, b[:, :4])


@pytest.fixture(scope="module")
def scoring_setup():
    r = np.random.default_rng(3)
    patches = r.integers(0, 256, (8, 64, 64), dtype=np.uint8)
    patches[1] = patches[0]
    store = PatchStore("s", patches, np.array([0, 0, 1, 1, 2, 2, 3, 3]))
    pre = Preprocessor.fit(patches)
    model = init_model(SMALL, seed=0)
    calibrate_batchnorm(model, pre.apply(patches))
    pairs = [PatchPair(0, 1, 1), PatchPair(2, 3, 1), PatchPair(0, 4, 0), PatchPair(5, 7, 0),
             PatchPair(6, 7, 1, AugmentTag(180, "horizontal")), PatchPair(2, 6, 0)]
    return model, pairs, store, pre


def test_score_pairs_basics(scoring_setup):
    model, pairs, store, pre = scoring_setup
    s = score_pairs(model, pairs, store, pre)
    assert s.distances[0] == 0
    assert s.labels.tolist() == [1, 1, 0, 0, 1, 0]
    again = score_pairs(model, pairs, store, pre)
    assert again.distances.tobytes() == s.distances.tobytes()


def test_score_pairs_matches_single_patch_descriptors(scoring_setup):
    model, pairs, store, pre = scoring_setup
    s = score_pairs(model, pairs, store, pre, batch_size=3)
    for p, d in zip(pairs, s.distances):
        x1 = pre.apply(store.patches[[p.idx1]])
        x2 = pre.apply(store.patches[[p.idx2]])
        if p.tag == AugmentTag(180, "horizontal"):
            # half turn then mirror: only the rows end up reversed
            x1, x2 = x1[:, :, ::-1].copy(), x2[:, :, ::-1].copy()
        ref = np.linalg.norm(describe(model, x1)[0].astype(np.float64) - describe(model, x2)[0])
        assert d == pytest.approx(ref, abs=1e-6)


def test_report_and_csv_bundle(tmp_path):
    s = ScoredPairs([0.1, 0.4, 0.2, 0.9], [1, 1, 0, 0])
    report = evaluate(s, bins=4, metadata={"model": "m"})
    assert report.fpr_at_95 == 0.5 and report.n_positive == 2
    write_report(report, tmp_path, comments=["provenance"])
    for name in ("roc.csv", "pr.csv", "hist.csv", "summary.csv"):
        lines = (tmp_path / name).read_text().splitlines()
        assert lines[0] == "# provenance"
    assert (tmp_path / "roc.csv").read_text().splitlines()[1] == "threshold,tpr,fpr"
    assert (tmp_path / "hist.csv").read_text().splitlines()[1] == "bin_low,bin_high,pos_count,neg_count"
    summary = (tmp_path / "summary.csv").read_text()
    assert "fpr_at_95,0.5" in summary and 'meta.model,"""m"""' in summary
