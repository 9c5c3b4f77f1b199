"""Poison a synthetic dataset, then train on it with and without augmentation.

The synthetic task is four classes of faint block patterns under pixel noise.
A class-wise LSP perturbation (one fixed 2-pixel-block pattern per class,
l2 norm 1.0) is a far easier feature than the real templates, so a model
trained with crop/flip alone learns the shortcut and fails on clean test
images.  UEraser-Lite trains on heavily augmented copies; plasma, channel
shuffles and TrivialAugment break the shortcut, and the true templates win.

Run with ``python demos/poison_and_defend.py`` (a few minutes on one core).
"""

import time

from ueraser.datasets import SynthSpec, synth_dataset
from ueraser.poisons import PoisonSpec, apply_poison, generate
from ueraser.trainer import TrainConfig, train

train_ds, test_ds = synth_dataset(SynthSpec())
poison = generate(train_ds, PoisonSpec(kind="lsp"))
poisoned = apply_poison(train_ds, poison)
print(f"{len(train_ds)} training images, LSP deltas of l2 norm {poison.eps}")


def run(label, variant, ds, **kw):
    t = time.perf_counter()
    result = train(TrainConfig.for_variant(variant, **kw), ds, test_ds)
    acc = result.final("test").accuracy
    print(f"{label:<22} test accuracy {acc:6.1%}  ({time.perf_counter() - t:.0f}s)")


run("clean, Plain", "plain", train_ds, epochs=30, batch_size=64)
run("poisoned, Plain", "plain", poisoned, epochs=30, batch_size=64)
run("poisoned, UEraser-Lite", "lite", poisoned, epochs=60, batch_size=32)
