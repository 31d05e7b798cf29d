"""
Losses, temporal ensemble and confidence masks
==============================================

The building blocks of the self-learning stage on toy arrays.
"""

import numpy as np

from uats.losses import consistency_loss, continuous_dice, effective_lambda, task_loss
from uats.ssl import EnsembleBuffer, build_confidence_mask, extract_pseudo_labels, gate_classes, softmax_confidence, \
    update_ensemble
from uats.tensor import softmax_channelwise

rng = np.random.default_rng(0)

# continuous Dice: on binary fields it is the ordinary Dice coefficient,
# on soft predictions the scale factor c removes the overall scale, so a
# faint but clean prediction scores 1; only mass leaking outside counts
truth = np.zeros(10)
truth[:4] = 1
print("binary half overlap", continuous_dice(truth, np.roll(truth, 2)))
print("soft 0.6 inside     ", continuous_dice(truth, 0.6 * truth))
print("soft 0.05 inside    ", continuous_dice(truth, 0.05 * truth))
print("0.6 in, 0.05 leak   ", round(continuous_dice(truth, 0.6 * truth + 0.05 * (1 - truth)), 4))

# the task loss sums -cDC over classes, so a perfect 3-class prediction scores -3
Y = np.eye(3)[rng.integers(0, 3, size=(2, 8, 8))].transpose(0, 3, 1, 2)
print("perfect task loss   ", task_loss(Y, Y)[0])

# consistency compares the prediction with the ensemble and vanishes when they agree
P = softmax_channelwise(rng.normal(size=(2, 3, 8, 8)))
print("self consistency    ", consistency_loss(P, P)[0])

# the consistency weight switches off while the consistency term dominates the task term
print("lambda gate         ", effective_lambda(1.0, prev_task=-2.0, prev_cons=0.1),
      effective_lambda(1.0, prev_task=-0.05, prev_cons=0.3))

# the ensemble moves towards new predictions only for classes whose validation loss improved
E0 = softmax_channelwise(rng.normal(size=(1, 3, 4, 4)))
buf = EnsembleBuffer(E0.copy(), 0.6, np.array([-0.5, -0.5, -0.5]))
improved = gate_classes(buf, np.array([-0.6, -0.4, -0.7]))
update_ensemble(buf, softmax_channelwise(rng.normal(size=(1, 3, 4, 4))), improved)
print("gated classes       ", sorted(improved))
print("best val per class  ", buf.best_val)

# repeated updates with a fixed target contract geometrically at rate alpha
target = softmax_channelwise(rng.normal(size=(1, 3, 4, 4)))
buf = EnsembleBuffer(E0.copy(), 0.6, np.zeros(3))
for k in range(1, 6):
    update_ensemble(buf, target, {0, 1, 2})
    print(f"step {k}: max |E - P| = {np.abs(buf.E - target).max():.5f}")

# pseudo labels are the ensemble argmax; per class only the most confident share is trained on
probs = softmax_channelwise(2 * rng.normal(size=(4, 3, 16, 16)))
labels = extract_pseudo_labels(probs)
mask, counts = build_confidence_mask(softmax_confidence(probs, labels), labels, np.zeros(4, bool), (0.5, 0.5, 0.1))
for s in range(3):
    print(f"class {s}: {int((labels == s).sum())} pseudo-labelled voxels, {counts[s]} kept")
