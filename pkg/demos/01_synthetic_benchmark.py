"""
The synthetic gland benchmark
=============================

Each 64x64 slice holds a large blob, a band hugging its lower half, a
small dark duct inside the blob and a thin crescent on its upper rim.
The duct and the crescent are the minority classes.
"""

import numpy as np

from uats.data import CLASS_NAMES, SyntheticSpec, add_gaussian_noise, class_frequencies, generate_dataset, make_split

# 120 samples: half of them form the labeled pool (20% of it frozen as test set),
# the other half arrive without labels
spec = SyntheticSpec(seed=0)
dataset = generate_dataset(spec, 120)
for pool in ("labeled", "test", "unlabeled"):
    print(f"{pool:<10} {sum(s.pool == pool for s in dataset)}")

# class shares over the labeled cases; the two minority classes are a few
# percent of the foreground each
counts = class_frequencies([s.label for s in dataset if s.label is not None])
fg = counts[1:].sum()
for name, c in zip(CLASS_NAMES, counts):
    share = f"{100 * c / fg:6.2f}% of foreground" if name != "background" else ""
    print(f"{name:<10} {100 * c / counts.sum():6.2f}% of pixels  {share}")

# a crude text rendering of one label map; each character covers a 4x2 block
# and shows the highest class id inside it, so the thin classes stay visible
lab = dataset[0].label
blocks = lab.reshape(16, 4, 32, 2).max(axis=(1, 3))
glyphs = np.array(list(".ob#c"))
for row in blocks:
    print("".join(glyphs[row]))

# at 10% of the labeled pool only four cases carry labels: three to train, one to validate;
# the unused pool cases join the unlabeled set without their labels
split = make_split(dataset, 0.10, repeat=0)
print("train", len(split.labeled), "validation", len(split.validation),
      "unlabeled", len(split.unlabeled), "test", len(split.test))

# noise injection reports the signal-to-noise ratio mean(image) / std(noise)
img = dataset[0].image
for sigma in (0.01, 0.025, 0.05, 0.1, 0.2):
    _, snr = add_gaussian_noise(img, sigma, seed=0)
    print(f"sigma {sigma:<6} SNR {snr:6.2f}  (mean/sigma {img.mean() / sigma:6.2f})")
