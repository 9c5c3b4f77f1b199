"""Unlearnable perturbations: error-minimizing (EM), class-wise linearly
separable (LSP-style) and augmentation-aware adaptive EM.

Also hosts the norm-ball projections shared with PGD adversarial training.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import ndgrad as nd
from .datasets import LabeledDataset
from .rng import derive_seed, keyed_rng

log = logging.getLogger(__name__)

PSET_MAGIC = b"UEPS"
PSET_VERSION = 1
KINDS = ("em", "lsp", "adaptive_em")
NORMS = ("linf", "l2")
BUDGET_SLACK = 1e-6

# EM alternation schedule (desk-scale constants)
EM_SURROGATE_STEPS = 10
EM_DELTA_STEPS = 20
EM_MAX_ROUNDS = 30
EM_STOP_ACC = 0.99


# ---------------------------------------------------------------- projections

def project_linf(delta, eps):
    return np.clip(delta, -eps, eps).astype(np.float32)


def project_l2(delta, eps):
    """Per-item projection onto the l2 ball; the leading axis indexes items."""
    flat = delta.reshape(len(delta), -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    # items already within float32 rounding of the budget count as feasible,
    # which keeps the projection idempotent
    scale = np.where(norms > eps + BUDGET_SLACK / 2, eps / np.maximum(norms, 1e-30), 1.0)
    return (flat * scale).reshape(delta.shape).astype(np.float32)


def project(delta, eps, norm):
    if norm == "linf":
        return project_linf(delta, eps)
    if norm == "l2":
        return project_l2(delta, eps)
    raise ValueError(f"unknown norm {norm!r}")


def norms_of(delta, norm):
    flat = delta.reshape(len(delta), -1).astype(np.float64)
    return np.abs(flat).max(axis=1) if norm == "linf" else np.linalg.norm(flat, axis=1)


def feasible(x, delta, eps, norm):
    """Project onto the ball, then keep x + delta in [0, 1]; the result stays in the ball."""
    delta = project(delta, eps, norm)
    delta = (np.clip(x + delta, 0, 1) - x).astype(np.float32)
    return project(delta, eps, norm)


def ascent_step(grad, step, norm):
    """Steepest-ascent direction scaled by ``step`` (sign for linf, unit-l2 otherwise)."""
    if norm == "linf":
        return step * np.sign(grad)
    flat = grad.reshape(len(grad), -1)
    n = np.linalg.norm(flat.astype(np.float64), axis=1).reshape((-1,) + (1,) * (grad.ndim - 1))
    return (step * grad / np.maximum(n, 1e-12)).astype(np.float32)


# ---------------------------------------------------------------- data types

@dataclass
class PerturbationSet:
    deltas: np.ndarray              # float32 [N or C, 3, H, W]
    norm: str
    eps: float
    granularity: str                # "sample" or "class"
    kind: str
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float32)
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.granularity not in ("sample", "class"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    def max_norm(self):
        return float(norms_of(self.deltas, self.norm).max()) if len(self.deltas) else 0.0

    def within_budget(self):
        return self.max_norm() <= self.eps + BUDGET_SLACK

    def header(self):
        return {"kind": self.kind, "norm": self.norm, "eps": self.eps,
                "granularity": self.granularity, "seed": self.seed,
                "shape": list(self.deltas.shape), "meta": self.meta}

    def save(self, path):
        hdr = json.dumps(self.header(), sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(PSET_MAGIC + struct.pack("<II", PSET_VERSION, len(hdr)) + hdr)
            f.write(np.ascontiguousarray(self.deltas, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if raw[:4] != PSET_MAGIC:
            raise ValueError(f"{path}: not a perturbation file")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != PSET_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        hdr = json.loads(raw[12:12 + hlen])
        shape = tuple(hdr["shape"])
        data = np.frombuffer(raw, dtype="<f4", offset=12 + hlen).reshape(shape).astype(np.float32)
        return cls(data, hdr["norm"], hdr["eps"], hdr["granularity"], hdr["kind"],
                   hdr["seed"], hdr.get("meta", {}))


@dataclass
class PoisonSpec:
    kind: str = "em"
    eps: float | None = None
    norm: str | None = None
    steps: int = EM_DELTA_STEPS
    step_size: float | None = None
    surrogate_steps: int = EM_SURROGATE_STEPS
    max_rounds: int = EM_MAX_ROUNDS
    stop_acc: float = EM_STOP_ACC
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    components: str = "PCT"          # adaptive_em subset of P(lasma), C(hannel shuffle), T(A)
    standard_aug: bool = True        # crop/flip inside the min-min loop, as in defender training
    fraction: float = 1.0
    targeted_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown poison kind {self.kind!r}")
        if self.eps is None:
            self.eps = 1.0 if self.kind == "lsp" else 8 / 255
        if self.norm is None:
            self.norm = "l2" if self.kind == "lsp" else "linf"
        self.validate()

    def validate(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if not 0 <= self.fraction <= 1:
            raise ValueError("fraction must lie in [0, 1]")
        if set(self.components) - set("PCT"):
            raise ValueError("components must be a subset of 'PCT'")

    def pipeline(self):
        mapping = {"P": aug.PLASMA, "C": aug.SHUFFLE, "T": aug.TA}
        return frozenset(mapping[c] for c in self.components) | self.base_pipeline()

    def base_pipeline(self):
        return frozenset(aug.STANDARD) if self.standard_aug else frozenset()

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- EM

def _loss_grad_wrt_input(params, x, y):
    xt = nd.Tensor(x, name="x")
    with nd.GradTape() as tape:
        tape.watch(xt)
        losses = nd.cross_entropy(nd.forward(params, xt), y)
        loss = nd.mean(losses)
    tape.backward(loss)
    return xt.grad, losses.data


def _accuracy(params, x, y):
    return float(np.mean(nd.predict_logits(params, x).argmax(axis=1) == y)) if len(y) else 1.0


def _min_min(ds: LabeledDataset, spec: PoisonSpec, components):
    """Alternate surrogate training and per-image error-minimizing delta steps.

    ``components`` is the augmentation subset applied before every loss
    evaluation (empty for plain EM).
    """
    n = len(ds)
    x, y = ds.images, ds.labels
    delta = np.zeros_like(x)
    step = spec.step_size if spec.step_size is not None else spec.eps / 10
    meta = {"rounds": 0, "converged": False, "surrogate_acc": None}
    if spec.eps == 0 or n == 0:
        meta["converged"] = True
        return delta, meta
    params = nd.init_params(ds.image_shape, ds.num_classes, derive_seed(spec.seed, "poisons", "surrogate"))
    order_seed = derive_seed(spec.seed, "poisons", "order")
    aug_seed = derive_seed(spec.seed, "poisons", "augment")
    cursor, epoch = 0, 0
    order = keyed_rng(order_seed, "order", epoch).permutation(n)
    best = (-1.0, delta.copy(), None)

    def augmented(xb, idx, counter, with_vjp=False):
        if not components:
            return (xb, None) if with_vjp else xb
        samples = [aug.sample_policy((aug_seed, counter, int(i), 0), components) for i in idx]
        return aug.augment_batch(samples, xb, with_vjp=with_vjp)

    for rnd in range(spec.max_rounds):
        # (a) surrogate steps on the current perturbed data
        for s in range(spec.surrogate_steps):
            if cursor >= n:
                epoch += 1
                order = keyed_rng(order_seed, "order", epoch).permutation(n)
                cursor = 0
            idx = order[cursor:cursor + spec.batch_size]
            cursor += spec.batch_size
            xb = augmented(np.clip(x[idx] + delta[idx], 0, 1), idx, 2 * (rnd * spec.surrogate_steps + s))
            with nd.GradTape() as tape:
                loss = nd.mean(nd.cross_entropy(nd.forward(params, xb), y[idx]))
            grads, _ = nd.clip_grad_norm(tape.backward(loss), 10.0)
            nd.sgd_step(params, grads, spec.lr, spec.momentum, spec.weight_decay)
        # (b) error-minimizing steps on every delta
        for k in range(spec.steps):
            counter = 2 * (rnd * spec.steps + k) + 1
            for start in range(0, n, 512):
                sl = slice(start, start + 512)
                xb = np.clip(x[sl] + delta[sl], 0, 1)
                xa, vjp = augmented(xb, range(start, min(start + 512, n)), counter, with_vjp=True)
                g, _ = _loss_grad_wrt_input(params, xa, y[sl])
                if vjp is not None:
                    g = vjp(g)
                delta[sl] = feasible(x[sl], delta[sl] - ascent_step(g, step, spec.norm), spec.eps, spec.norm)
            assert norms_of(delta, spec.norm).max() <= spec.eps + BUDGET_SLACK
        acc = _accuracy(params, np.clip(x + delta, 0, 1), y)
        meta.update(rounds=rnd + 1, surrogate_acc=acc)
        log.info("min-min round %d: surrogate accuracy on perturbed data %.4f", rnd + 1, acc)
        if acc > best[0]:
            best = (acc, delta.copy(), rnd + 1)
        if acc >= spec.stop_acc:
            meta["converged"] = True
            return delta, meta
    log.warning("min-min did not reach %.2f surrogate accuracy; returning best round", spec.stop_acc)
    meta.update(surrogate_acc=best[0], best_round=best[2], warning="not converged")
    return best[1], meta


def em_poison(ds: LabeledDataset, spec: PoisonSpec) -> PerturbationSet:
    if spec.kind != "em":
        raise ValueError("em_poison requires kind='em'")
    delta, meta = _min_min(ds, spec, spec.base_pipeline())
    return PerturbationSet(delta, spec.norm, spec.eps, "sample", "em", spec.seed, meta)


def adaptive_em_poison(ds: LabeledDataset, spec: PoisonSpec) -> PerturbationSet:
    """EM with a freshly drawn augmentation subset applied inside every loss."""
    if spec.kind != "adaptive_em":
        raise ValueError("adaptive_em_poison requires kind='adaptive_em'")
    delta, meta = _min_min(ds, spec, spec.pipeline())
    meta["components"] = spec.components
    return PerturbationSet(delta, spec.norm, spec.eps, "sample", "adaptive_em", spec.seed, meta)


# ---------------------------------------------------------------- LSP-style

def lsp_poison(ds: LabeledDataset, spec: PoisonSpec) -> PerturbationSet:
    """One random block pattern per class, rescaled to l2 norm eps."""
    if spec.kind != "lsp":
        raise ValueError("lsp_poison requires kind='lsp'")
    _, h, w = ds.image_shape
    side = max(h // 4, 2)
    bh, bw = -(-h // side), -(-w // side)
    rng = keyed_rng(derive_seed(spec.seed, "poisons", "lsp"), "blocks")
    blocks = rng.standard_normal((ds.num_classes, 3, bh, bw))
    pat = np.repeat(np.repeat(blocks, side, axis=2), side, axis=3)[:, :, :h, :w]
    norms = np.linalg.norm(pat.reshape(ds.num_classes, -1), axis=1)
    deltas = pat * (spec.eps / norms)[:, None, None, None]
    return PerturbationSet(deltas.astype(np.float32), spec.norm, spec.eps, "class", "lsp",
                           spec.seed, {"block": side})


def generate(ds: LabeledDataset, spec: PoisonSpec) -> PerturbationSet:
    return {"em": em_poison, "lsp": lsp_poison, "adaptive_em": adaptive_em_poison}[spec.kind](ds, spec)


# ---------------------------------------------------------------- application

def apply_poison(ds: LabeledDataset, pset: PerturbationSet, fraction=1.0, targeted_class=None, seed=0):
    """Perturb a seeded random fraction of ``ds`` (or exactly one class)."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(ds)
    if targeted_class is not None:
        if not 0 <= targeted_class < ds.num_classes:
            raise ValueError(f"targeted class {targeted_class} out of range")
        mask = ds.labels == targeted_class
    else:
        mask = np.zeros(n, bool)
        count = int(round(fraction * n))
        mask[keyed_rng(derive_seed(seed, "poisons", "subset"), "subset").permutation(n)[:count]] = True
    if pset.granularity == "class":
        deltas = pset.deltas[ds.labels]
    else:
        if len(pset.deltas) != n:
            raise ValueError(f"{len(pset.deltas)} sample-wise deltas for {n} images")
        deltas = pset.deltas
    images = ds.images.copy()
    images[mask] = np.clip(images[mask] + deltas[mask], 0, 1)
    meta = dict(ds.meta, poison=pset.kind, poison_eps=pset.eps, poisoned=int(mask.sum()))
    out = LabeledDataset(images, ds.labels, ds.num_classes, "poisoned", meta)
    out.meta["poisoned_mask"] = mask
    return out
