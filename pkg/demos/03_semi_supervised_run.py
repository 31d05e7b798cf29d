"""
Supervised baseline versus uncertainty-aware self-learning
==========================================================

A shortened version of the labeled-ratio experiment: three labeled cases,
a supervised warm-up, then the self-learning stage on the unlabeled pool.
Takes a few minutes on one core.

With a single validation case the self-learning stage is not guaranteed to
help: pseudo labels inherit the warm-up model's confident mistakes, and one
case is too little to notice when training on them drifts.  The epoch log
below shows how rarely the class gate lets the ensemble move.
"""

import numpy as np

from uats.data import CLASS_NAMES, SyntheticSpec, generate_dataset, make_split
from uats.experiments import mean_dc_by_sigma, noise_sweep
from uats.metrics import aggregate, wilcoxon_signed_rank
from uats.trainer import TrainConfig, run_variant

dataset = generate_dataset(SyntheticSpec(seed=0), 120)
split = make_split(dataset, 0.10, repeat=0)

# short schedules; min_batches keeps a tiny labeled set from giving one step per epoch
config = TrainConfig(max_epochs=60, patience=20, min_batches=10, stage2_max_epochs=10, stage2_patience=5, seed=0)

# the baseline is the Stage-I model; the self-learning run starts from it
base = run_variant("B", config, split)
uats = run_variant("G", config, split, pretrained=base.pretrained)

sb, su = aggregate(base.records), aggregate(uats.records)
for s in range(1, 5):
    b = [r.dc[s] for r in base.records]
    u = [r.dc[s] for r in uats.records]
    p = wilcoxon_signed_rank(u, b).pvalue
    print(f"{CLASS_NAMES[s]:<10} B {100 * sb[('B', s, 'dc')].mean:5.1f}   G {100 * su[('G', s, 'dc')].mean:5.1f}   p={p:.3f}")

# the epoch log shows which classes entered the ensemble and how many voxels were selected
for entry in uats.logs:
    if entry.stage == 2:
        print(f"epoch {entry.epoch}: val {entry.val_loss:.3f} gated {entry.gated} selected {sum(entry.selected)}")

# robustness: mean foreground Dice as the test images get noisier
rows = noise_sweep(uats.model, split.test, seed=0, variant="G")
for sigma, dc in mean_dc_by_sigma(rows).items():
    snr = next(r[1] for r in rows if r[0] == sigma)
    print(f"sigma {sigma:<6} SNR {snr:6.2f}  mean DC {100 * dc:5.1f}")
