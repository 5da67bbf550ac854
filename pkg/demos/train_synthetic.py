"""
Training a patch descriptor on synthetic data
=============================================

Builds a small synthetic patch dataset, trains cnn7 for a few epochs and
shows the positive and negative distances separating.  About two minutes
on one core.
"""
import numpy as np

from patchdesc.data import PairDataset, make_synthetic_dataset
from patchdesc.evaluate import fpr_at_recall, pr_curve, score_pairs
from patchdesc.loss import estimate_margin
from patchdesc.model import calibrate_batchnorm, init_model
from patchdesc.optim import AdadeltaState, TrainSchedule, train
from patchdesc.preprocess import Preprocessor

# 120 "3D points", four views each; train and test points are disjoint
store, train_pairs, test_pairs = make_synthetic_dataset(120, 4, seed=0, train_fraction=0.25)
print(f"{len(store)} patches, {len(train_pairs)} training pairs, {len(test_pairs)} test pairs")

# mean/std come from the training patches only
pre = Preprocessor.fit_pairs(train_pairs, store)

# running statistics of a fresh network are placeholders, so calibrate them first
model = init_model("cnn7", seed=0)
calibrate_batchnorm(model, pre.apply(store.patches[train_pairs.patch_indices()]))

# margin: twice the mean distance between pair descriptors before learning
x1 = pre.apply(store.patches[[p.idx1 for p in train_pairs]])
x2 = pre.apply(store.patches[[p.idx2 for p in train_pairs]])
margin = estimate_margin(model, (x1, x2))
print(f"margin = {margin:.3f}")


def summary(tag):
    s = score_pairs(model.eval(), test_pairs, store, pre)
    print(f"{tag:>8}: pos {s.positives.mean():.3f}  neg {s.negatives.mean():.3f}  "
          f"FPR@95 {fpr_at_recall(s):.3f}  PR-AUC {pr_curve(s)[1]:.3f}")


summary("epoch 0")
state = AdadeltaState(lr=1.0)
data = PairDataset(store, train_pairs, pre)
for epoch in range(4):
    model.train()
    result = train(model, data, TrainSchedule(epochs=epoch + 1, batch_size=10, shuffle_seed=0, margin=margin),
                   state, start_epoch=epoch)
    losses = [t[2] for t in result.trace if t[1] == epoch]
    print(f"epoch {epoch + 1} mean loss {np.mean(losses):.4f}")
    summary(f"epoch {epoch + 1}")
