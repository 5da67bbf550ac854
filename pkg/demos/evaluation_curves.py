"""
Reading the evaluation numbers
==============================

FPR@95 and PR-AUC on hand-made distance distributions, then the CSV
bundle that ``patchdesc eval`` writes.  Runs in a second.
"""
import sys
import tempfile

import numpy as np

from patchdesc.evaluate import ScoredPairs, aggregate_means, evaluate, fpr_at_recall, write_report

rng = np.random.default_rng(0)

# positives cluster at small distances, negatives further out, with some overlap
pos = np.abs(rng.normal(0.5, 0.2, 500))
neg = rng.normal(1.1, 0.25, 500)
s = ScoredPairs(np.r_[pos, neg], np.r_[np.ones(500, int), np.zeros(500, int)])

report = evaluate(s, bins=20)
print(f"FPR@95 = {report.fpr_at_95:.4f}, PR-AUC = {report.pr_auc:.4f}")

# the operating point: 95% of positives are at or below this distance
print(f"FPR at 80% recall instead: {fpr_at_recall(s, 0.8):.4f}")

# a text histogram of the two distance populations
h = report.histogram
for lo, hi, p, n in zip(h.edges[:-1], h.edges[1:], h.positive, h.negative):
    print(f"{lo:5.2f}-{hi:5.2f} {'+' * (p // 10):<15}{'-' * (n // 10)}")

# six train/test combinations averaged two ways
print("mean, mean over first four:", aggregate_means([15.19, 8.36, 12.20, 14.72, 6.93, 15.86]))

out = tempfile.mkdtemp()
write_report(report, out, comments=["demo"])
print(f"CSV bundle in {out}:")
with open(f"{out}/summary.csv") as fh:
    sys.stdout.write(fh.read())
