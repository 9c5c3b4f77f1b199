"""What the error-maximizing step actually picks.

For each image in a batch, UEraser draws K augmentation policies, scores every
augmented copy with the current model and keeps the one with the highest
loss.  This script prints the K losses for a few images, the chosen draw, and
the policy behind it, so the bookkeeping can be checked by eye.
"""

import numpy as np

from ueraser import ndgrad as nd
from ueraser.datasets import SynthSpec, synth_dataset
from ueraser.trainer import max_loss_select

train_ds, _ = synth_dataset(SynthSpec(train_per_class=8))
params = nd.init_params(train_ds.image_shape, train_ds.num_classes, seed=0)
idx = np.arange(6)
sel = max_loss_select(params, train_ds.images[idx], train_ds.labels[idx], repeats=5, keys=(0, 1, idx))

np.set_printoptions(precision=4, suppress=True)
for i, gi in enumerate(idx):
    print(f"image {gi}: losses {sel.losses[i]} -> draw {sel.choice[i]}")
    print(f"    {sel.samples[i]}")
print("mean selected loss", sel.selected.mean(), "vs mean over draws", sel.losses.mean())
