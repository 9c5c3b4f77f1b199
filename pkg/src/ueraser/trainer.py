"""Training with error-maximizing augmentation selection, its variants and
the PGD adversarial-training baseline.

Variants
--------
plain    crop/flip only
lite     full augmentation pipeline, one draw per image (K = 1)
ueraser  K draws per image for the first W epochs, keep the max-loss one;
         Lite behaviour afterwards
max      ueraser with W = E
at       crop/flip followed by PGD on the input
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import augment as aug
from . import ndgrad as nd
from .datasets import LabeledDataset, minibatches
from .poisons import ascent_step, feasible
from .rng import derive_seed, keyed_rng

log = logging.getLogger(__name__)

VARIANTS = ("plain", "lite", "ueraser", "max", "at")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, params=None, epoch=None):
        super().__init__(msg)
        self.params, self.epoch = params, epoch


@dataclass
class TrainConfig:
    variant: str = "ueraser"
    epochs: int = 30
    warmup: int = 10
    repeats: int = 5
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    eval_every: int = 1
    grad_clip: float | None = 1.0
    at_eps: float = 4 / 255
    at_steps: int = 7
    at_norm: str = "linf"
    threads: int | None = None

    def validate(self):
        if self.variant not in VARIANTS:
            raise nd.ConfigError(f"unknown variant {self.variant!r}")
        if self.repeats < 1:
            raise nd.ConfigError("K must be >= 1")
        if not 0 <= self.warmup <= self.epochs:
            raise nd.ConfigError("W must satisfy 0 <= W <= E")
        if self.variant == "lite" and self.repeats != 1:
            raise nd.ConfigError("Lite requires K=1")
        if self.variant == "max" and self.warmup != self.epochs:
            raise nd.ConfigError("Max requires W=E")
        if self.batch_size < 1 or self.epochs < 0:
            raise nd.ConfigError("batch size must be positive and epochs non-negative")
        if self.variant == "at" and (self.at_eps <= 0 or self.at_steps < 0):
            raise nd.ConfigError("adversarial training needs eps > 0 and steps >= 0")
        return self

    @classmethod
    def for_variant(cls, variant, **kw):
        """Config with K/W filled in consistently for ``variant``."""
        cfg = cls(variant=variant, **kw)
        if variant in ("lite", "plain", "at"):
            cfg.repeats = 1
            cfg.warmup = 0 if variant != "lite" else min(cfg.warmup, cfg.epochs)
        if variant == "max":
            cfg.warmup = cfg.epochs
        return cfg.validate()

    def repeats_at(self, epoch):
        """K used in 1-based ``epoch``: error-maximizing for epochs 1..W."""
        if self.variant in ("ueraser", "max") and epoch <= self.warmup:
            return self.repeats
        return 1

    def components(self):
        return aug.STANDARD if self.variant in ("plain", "at") else aug.FULL_PIPELINE

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    accuracy: float
    loss: float
    wall_ms: float
    selected_loss: float | None = None
    pre_selection_loss: float | None = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Selection:
    images: np.ndarray        # chosen augmented batch
    samples: list             # winning PolicySample per image
    losses: np.ndarray        # [B, K] loss of every draw
    choice: np.ndarray        # [B] index of the winning draw

    @property
    def selected(self):
        return self.losses[np.arange(len(self.choice)), self.choice]


@dataclass
class TrainResult:
    params: nd.ModelParams
    records: list = field(default_factory=list)

    def final(self, split="test"):
        recs = [r for r in self.records if r.split == split]
        return recs[-1] if recs else None


# ---------------------------------------------------------------- selection

def max_loss_select(params, images, labels, repeats, keys, components=aug.FULL_PIPELINE, threads=None):
    """Draw ``repeats`` policies per image and keep the one with the largest loss.

    ``keys`` is ``(aug_seed, epoch, indices)``; draw j of image i uses the
    stream (aug_seed, epoch, indices[i], j).  Ties go to the lowest j.
    Parameters are not modified.
    """
    aug_seed, epoch, indices = keys
    bs = len(labels)
    draws, outs = [], []
    for j in range(repeats):
        s = aug.sample_batch(aug_seed, epoch, indices, j, components)
        draws.append(s)
        outs.append(aug.augment_batch(s, images, threads=threads))
    if repeats == 1:
        stacked = outs[0]
    else:
        stacked = np.concatenate(outs)
    z = nd.predict_logits(params, stacked)
    losses = nd.cross_entropy(z, np.tile(labels, repeats)).data.reshape(repeats, bs).T
    choice = losses.argmax(axis=1)
    chosen = np.stack([outs[c][i] for i, c in enumerate(choice)]) if bs else images
    samples = [draws[c][i] for i, c in enumerate(choice)]
    return Selection(chosen, samples, losses, choice)


# ---------------------------------------------------------------- PGD

def pgd_perturb(params, x, y, eps, steps, norm="linf", rng=None):
    """PGD ascent from a random start in the ball; step 2.5 * eps / steps."""
    if steps == 0:
        return x
    rng = rng or np.random.default_rng(0)
    if norm == "linf":
        delta = rng.uniform(-eps, eps, x.shape).astype(np.float32)
    else:
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d.reshape(len(x), -1), axis=1).reshape(-1, 1, 1, 1)
        delta = (d * eps * rng.random((len(x), 1, 1, 1))).astype(np.float32)
    delta = feasible(x, delta, eps, norm)
    step = 2.5 * eps / steps
    for _ in range(steps):
        xt = nd.Tensor(np.clip(x + delta, 0, 1), name="x")
        with nd.GradTape() as tape:
            tape.watch(xt)
            loss = nd.mean(nd.cross_entropy(nd.forward(params, xt), y))
        tape.backward(loss)
        delta = feasible(x, delta + ascent_step(xt.grad, step, norm), eps, norm)
    return np.clip(x + delta, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- evaluation

def evaluate(params, ds: LabeledDataset):
    """Clean accuracy and confusion matrix (rows: true, cols: predicted)."""
    pred = nd.predict_logits(params, ds.images).argmax(axis=1)
    conf = np.zeros((ds.num_classes, ds.num_classes), np.int64)
    np.add.at(conf, (ds.labels, pred), 1)
    acc = float(np.trace(conf) / max(len(ds), 1))
    return acc, conf


def per_class_accuracy(conf):
    conf = np.asarray(conf)
    return np.diag(conf) / np.maximum(conf.sum(axis=1), 1)


def _mean_loss(params, ds):
    if not len(ds):
        return 0.0
    z = nd.predict_logits(params, ds.images)
    return float(nd.cross_entropy(z, ds.labels).data.mean(dtype=np.float64))


# ---------------------------------------------------------------- training

def train(config: TrainConfig, train_ds: LabeledDataset, test_ds: LabeledDataset | None = None,
          params=None, start_epoch=1, on_record=None, on_epoch_end=None) -> TrainResult:
    """Run epochs ``start_epoch..E``; ``params`` resumes from a checkpoint."""
    config.validate()
    if params is None:
        params = nd.init_params(train_ds.image_shape, train_ds.num_classes,
                                derive_seed(config.seed, "trainer", "init"))
    order_seed = derive_seed(config.seed, "trainer", "minibatch")
    aug_seed = derive_seed(config.seed, "trainer", "augment")
    components = config.components()
    result = TrainResult(params)

    def emit(rec):
        result.records.append(rec)
        if on_record:
            on_record(rec)

    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        snapshot = params.copy()
        k = config.repeats_at(epoch)
        n_seen = correct = 0
        loss_sum = sel_sum = pre_sum = 0.0
        for b, (xb, yb, idx) in enumerate(minibatches(train_ds, config.batch_size, epoch, order_seed)):
            if k == 1:
                samples = aug.sample_batch(aug_seed, epoch, idx, 0, components)
                xa = aug.augment_batch(samples, xb, threads=config.threads)
            else:
                sel = max_loss_select(params, xb, yb, k, (aug_seed, epoch, idx), components, config.threads)
                xa = sel.images
                sel_sum += float(sel.selected.sum(dtype=np.float64))
                pre_sum += float(sel.losses.mean(axis=1).sum(dtype=np.float64))
            if config.variant == "at":
                rng = keyed_rng(derive_seed(config.seed, "trainer", "pgd"), "pgd", epoch, b)
                xa = pgd_perturb(params, xa, yb, config.at_eps, config.at_steps, config.at_norm, rng)
            with nd.GradTape() as tape:
                logits = nd.forward(params, xa)
                losses = nd.cross_entropy(logits, yb)
                loss = nd.mean(losses)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", snapshot, epoch - 1)
            grads, _ = nd.clip_grad_norm(tape.backward(loss), config.grad_clip)
            try:
                nd.sgd_step(params, grads, config.lr, config.momentum, config.weight_decay)
            except nd.NonFiniteUpdate as e:
                e.epoch, e.batch = epoch, b
                raise TrainingDiverged(f"{e.args[0]} at epoch {epoch}, batch {b}", snapshot, epoch - 1) from e
            n_seen += len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            batch_loss = float(losses.data.sum(dtype=np.float64))
            loss_sum += batch_loss
            if k == 1:
                sel_sum += batch_loss
                pre_sum += batch_loss
        denom = max(n_seen, 1)
        emit(MetricsRecord(epoch, "train", correct / denom, loss_sum / denom,
                           (time.perf_counter() - t0) * 1e3, sel_sum / denom, pre_sum / denom))
        if test_ds is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            t1 = time.perf_counter()
            acc, _ = evaluate(params, test_ds)
            emit(MetricsRecord(epoch, "test", acc, _mean_loss(params, test_ds),
                               (time.perf_counter() - t1) * 1e3))
        log.info("epoch %d/%d variant=%s K=%d train_acc=%.3f", epoch, config.epochs, config.variant,
                 k, correct / denom)
        if on_epoch_end:
            on_epoch_end(epoch, params)
    return result


def adversarial_train(config: TrainConfig, train_ds, test_ds=None, eps=None, steps=None, norm=None, **kw):
    """PGD adversarial training (``steps`` = 0 reduces to plain training)."""
    cfg = TrainConfig(**{**config.to_dict(), "variant": "at", "repeats": 1, "warmup": 0})
    if eps is not None:
        cfg.at_eps = eps
    if steps is not None:
        cfg.at_steps = steps
    if norm is not None:
        cfg.at_norm = norm
    return train(cfg, train_ds, test_ds, **kw)
