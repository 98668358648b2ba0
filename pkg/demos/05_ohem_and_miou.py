"""
Hard-pixel loss and mIoU
========================

Training uses cross-entropy over the *hard* pixels only: those whose
true-class probability is below theta (0.7), topped up with the
highest-loss pixels when fewer than min_kept qualify. Evaluation uses
per-class IoU from an integer confusion matrix.
"""
import numpy as np

from atvnet.loss import OHEMConfig, ohem_loss, per_pixel_ce
from atvnet.metrics import ConfusionMatrix, format_report

rng = np.random.default_rng(0)
labels = rng.integers(0, 5, (1, 4, 4))
# a model that is right about some pixels: boost the true class by a random margin
logits = rng.standard_normal((1, 5, 4, 4))
np.put_along_axis(logits, labels[:, None], rng.uniform(-1, 5, (1, 1, 4, 4)), axis=1)
labels[0, 0, :2] = 255                        # ignored pixels

m = per_pixel_ce(logits, labels)
print("true-class probabilities:\n", np.round(m.prob[0], 2))

for theta, min_kept in [(0.7, 0), (0.3, 0), (0.3, 8), (1.0, 0)]:
    loss, dlogits, sel = ohem_loss(logits, labels, OHEMConfig(theta, min_kept))
    print(f"theta={theta} min_kept={min_kept}: {int(sel.sum()):2d} pixels selected, loss {loss:.4f}, "
          f"grad nonzero on {int((np.abs(dlogits).sum(1) > 0).sum())} pixels")

# uniform logits: every pixel costs ln 5
print("uniform logits loss %.4f vs ln5 %.4f" % (ohem_loss(np.zeros((1, 5, 2, 2)), np.zeros((1, 2, 2), int),
                                                         OHEMConfig(1.0))[0], np.log(5)))

# mIoU: a hand-checkable two-class matrix
cm = ConfusionMatrix(2)
cm.counts[:] = [[3, 1], [2, 4]]
print(format_report(cm))

# streaming: per-image updates accumulate to the same matrix as one big update
pred, lab = rng.integers(0, 3, (4, 8, 8)), rng.integers(0, 3, (4, 8, 8))
one = ConfusionMatrix(3).update(pred, lab)
many = ConfusionMatrix(3)
for p, l in zip(pred, lab):
    many.update(p, l)
print("streaming equals one-shot:", np.array_equal(one.counts, many.counts))
