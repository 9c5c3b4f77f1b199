"""Experiment harness: ``gen-poison``, ``train``, ``eval`` and ``report``.

A config is one flat JSON document with a block per module::

    {
      "seed": 0,
      "dataset": {"kind": "synth", "train_per_class": 500},
      "poison":  {"kind": "em", "eps": 0.0313725},
      "train":   {"variant": "ueraser", "epochs": 30, "warmup": 10, "repeats": 5}
    }

``dataset.kind`` is ``synth`` (remaining keys are ``SynthSpec`` fields) or
``cifar10`` (``path``, optional ``train_limit`` / ``test_limit``).  The
``poison`` block is either a ``PoisonSpec`` or ``{"file": "poison.bin"}``
pointing at a previously generated set; ``fraction`` and ``targeted_class``
apply in both forms.  Block seeds default to values derived from the
top-level seed.  Relative paths resolve against the config's directory.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from . import poisons as P
from . import trainer as T
from .augment import threads_from_env
from .datasets import DatasetFormatError, LabeledDataset, SynthSpec, load_cifar10, load_records, read_cifar_batch, \
    save_records, synth_dataset
from .rng import derive_seed

log = logging.getLogger("ueraser")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
CHECKPOINT = "checkpoint.bin"
METRICS = "metrics.jsonl"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config

def load_config(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "seed" not in cfg:
        raise ConfigError(f"{path}: a top-level 'seed' is required")
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def _resolve(cfg, p):
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _block_seed(cfg, block, name):
    return int(block.get("seed", derive_seed(cfg["seed"], name) % 2 ** 31))


def _fields(cls, block, skip=()):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(block) - known - set(skip)
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return {k: v for k, v in block.items() if k in known}


def build_datasets(cfg):
    block = dict(cfg.get("dataset") or {"kind": "synth"})
    kind = block.pop("kind", "synth")
    if kind == "synth":
        block.setdefault("seed", _block_seed(cfg, block, "datasets"))
        spec = SynthSpec(**_fields(SynthSpec, block))
        try:
            return synth_dataset(spec)
        except ValueError as e:
            raise ConfigError(f"dataset: {e}")
    if kind == "cifar10":
        if "path" not in block:
            raise ConfigError("dataset: cifar10 needs 'path'")
        root = _resolve(cfg, block["path"])
        if not root.exists():
            raise ConfigError(f"dataset: path does not exist: {root}")
        try:
            return load_cifar10(root, block.get("train_limit"), block.get("test_limit"))
        except DatasetFormatError as e:
            raise ConfigError(f"dataset: {e}")
    raise ConfigError(f"dataset: unknown kind {kind!r}")


def poison_spec(cfg):
    block = dict(cfg.get("poison") or {})
    if not block or "file" in block:
        raise ConfigError("poison block with a 'kind' is required")
    block.setdefault("seed", _block_seed(cfg, block, "poisons"))
    try:
        return P.PoisonSpec(**_fields(P.PoisonSpec, block))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"poison: {e}")


def train_config(cfg, overrides=None):
    """TrainConfig from the train block plus command-line overrides.

    A variant's implied K / W (Lite: K=1, Max: W=E, Plain/AT: K=1, W=0) fill
    in whatever is unset; a variant named on the command line also replaces
    K / W inherited from the file unless ``--k`` / ``--warmup`` are given.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    block = dict(cfg.get("train") or {})
    block.setdefault("seed", _block_seed(cfg, block, "trainer"))
    if "variant" in overrides and overrides["variant"] != block.get("variant"):
        block.pop("repeats", None)
        block.pop("warmup", None)
    block.update(overrides)
    variant = block.get("variant", "ueraser")
    if variant in ("lite", "plain", "at"):
        block.setdefault("repeats", 1)
    if variant in ("plain", "at"):
        block.setdefault("warmup", 0)
    if variant == "lite":
        block.setdefault("warmup", 0)
    if variant == "max":
        block.setdefault("warmup", block.get("epochs", T.TrainConfig.epochs))
    if block.get("threads") is None:
        block["threads"] = threads_from_env()
    try:
        return T.TrainConfig(**_fields(T.TrainConfig, block)).validate()
    except (TypeError, nd.ConfigError) as e:
        raise ConfigError(str(e))


def _sha256(*chunks):
    h = hashlib.sha256()
    for c in chunks:
        h.update(c if isinstance(c, bytes) else str(c).encode())
    return h.hexdigest()


def dataset_hash(ds: LabeledDataset):
    return _sha256(np.ascontiguousarray(ds.images).tobytes(), ds.labels.astype("<i8").tobytes())


def _public(cfg):
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------- gen-poison

def cmd_gen_poison(args):
    cfg = load_config(args.config)
    spec = poison_spec(cfg)
    train_ds, _ = build_datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    pset = P.generate(train_ds, spec)
    wall = time.perf_counter() - t0
    pset.save(out / "poison.bin")
    manifest = {
        "spec": spec.to_dict(), "seed": spec.seed, "kind": spec.kind, "norm": spec.norm,
        "budget": spec.eps, "max_norm": pset.max_norm(), "granularity": pset.granularity,
        "surrogate_accuracy": pset.meta.get("surrogate_acc"), "meta": pset.meta,
        "wall_seconds": round(wall, 3), "dataset_sha256": dataset_hash(train_ds),
        "poison_sha256": _sha256((out / "poison.bin").read_bytes()),
    }
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %s (max norm %.6f, budget %.6f)", out / "poison.bin", pset.max_norm(), spec.eps)
    return EXIT_OK


# ---------------------------------------------------------------- train

def _poisoned_train_set(cfg, train_ds, out):
    block = cfg.get("poison")
    if not block:
        return train_ds, None
    fraction = block.get("fraction", 1.0)
    target = block.get("targeted_class")
    if "file" in block:
        path = _resolve(cfg, block["file"])
        if not path.exists():
            raise ConfigError(f"poison file not found: {path}")
        pset = P.PerturbationSet.load(path)
    else:
        cached = out / "poison.bin"
        spec = poison_spec(cfg)
        if cached.exists():
            pset = P.PerturbationSet.load(cached)
        else:
            pset = P.generate(train_ds, spec)
            pset.save(cached)
    try:
        ds = P.apply_poison(train_ds, pset, fraction, target, seed=_block_seed(cfg, block, "poisons/apply"))
    except ValueError as e:
        raise ConfigError(f"poison: {e}")
    return ds, pset


def cmd_train(args):
    cfg = load_config(args.config)
    overrides = {"variant": args.variant, "repeats": args.k, "warmup": args.warmup, "seed": args.seed}
    tc = train_config(cfg, overrides)
    train_ds, test_ds = build_datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, pset = _poisoned_train_set(cfg, train_ds, out)

    echo = {**_public(cfg), "train": tc.to_dict()}
    echo["train"].pop("threads")           # parallelism never changes results
    # epochs stay out of the hash so a finished run can be extended by resuming
    hashed = {**echo, "train": {k: v for k, v in echo["train"].items() if k != "epochs"}}
    inputs_hash = _sha256(json.dumps(hashed, sort_keys=True), dataset_hash(train_ds), dataset_hash(test_ds))
    _write_json(out / "config.json", echo)
    save_records(out / "test.bin", test_ds)
    manifest = {"inputs_sha256": inputs_hash, "train_sha256": dataset_hash(train_ds),
                "test_sha256": dataset_hash(test_ds), "variant": tc.variant,
                "poison": None if pset is None else pset.header()}

    params, start = None, 1
    ckpt = out / CHECKPOINT
    metrics_path = out / METRICS
    if ckpt.exists():
        params, desc = nd.load_checkpoint(ckpt)
        if desc.get("inputs_sha256") != inputs_hash:
            raise ConfigError(f"{ckpt} belongs to a different configuration; use a fresh --out")
        start = int(desc["epoch"]) + 1
        kept = [ln for ln in metrics_path.read_text().splitlines() if json.loads(ln)["epoch"] < start] \
            if metrics_path.exists() else []
        metrics_path.write_text("".join(ln + "\n" for ln in kept))
        log.info("resuming from epoch %d", start)
    else:
        metrics_path.write_text("")
    _write_json(out / "manifest.json", manifest)

    with open(metrics_path, "a") as mf:
        def on_record(rec):
            mf.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            mf.flush()

        def on_epoch_end(epoch, p):
            nd.save_checkpoint(ckpt, p, {"epoch": epoch, "inputs_sha256": inputs_hash})

        try:
            result = T.train(tc, train_ds, test_ds, params=params, start_epoch=start,
                             on_record=on_record, on_epoch_end=on_epoch_end)
        except T.TrainingDiverged as e:
            if e.params is not None and not ckpt.exists():
                nd.save_checkpoint(ckpt, e.params, {"epoch": e.epoch, "inputs_sha256": inputs_hash})
            log.error("training diverged: %s (last good checkpoint at %s)", e, ckpt)
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DIVERGED
    acc, conf = T.evaluate(result.params, test_ds)
    report = {"variant": tc.variant, "test_accuracy": acc, "confusion": conf,
              "per_class_accuracy": T.per_class_accuracy(conf), "epochs": tc.epochs,
              "poison": manifest["poison"], "config": echo}
    _write_json(out / "report.json", report)
    print(f"final clean test accuracy {acc:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _load_any_dataset(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    head = path.read_bytes()[:4]
    try:
        if head == b"UESD":
            return load_records(path, tag="test")
        if path.stat().st_size % 3073 == 0:
            x, y = read_cifar_batch(path, expected_records=path.stat().st_size // 3073)
            return LabeledDataset(x, y, 10, "test")
    except DatasetFormatError as e:
        raise ConfigError(str(e))
    raise ConfigError(f"{path}: neither a record file nor a CIFAR-10 batch")


def cmd_eval(args):
    try:
        params, desc = nd.load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.ckpt}")
    except nd.ConfigError as e:
        raise ConfigError(str(e))
    ds = _load_any_dataset(args.dataset)
    if tuple(params.in_shape) != ds.image_shape or params.num_classes < ds.num_classes:
        raise ConfigError(f"checkpoint expects {params.in_shape} with {params.num_classes} classes, "
                          f"dataset has {ds.image_shape} with {ds.num_classes}")
    acc, conf = T.evaluate(params, ds)
    print(json.dumps({"accuracy": acc, "confusion": conf.tolist(), "epoch": desc.get("epoch"),
                      "per_class_accuracy": T.per_class_accuracy(conf).tolist()}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- report

def _read_run(d):
    d = Path(d)
    mp, cp = d / METRICS, d / "config.json"
    if not mp.exists() or not cp.exists():
        return None
    recs = [json.loads(ln) for ln in mp.read_text().splitlines() if ln.strip()]
    test = [r for r in recs if r["split"] == "test"]
    if not test:
        return None
    cfg = json.loads(cp.read_text())
    poison = cfg.get("poison") or {}
    if "file" in poison and not poison.get("kind"):
        man = d / "manifest.json"
        poison = dict(poison, kind=(json.loads(man.read_text()).get("poison") or {}).get("kind", "file")) \
            if man.exists() else poison
    train_acc = {r["epoch"]: r["accuracy"] for r in recs if r["split"] == "train"}
    return {
        "run": d.name,
        "variant": cfg["train"]["variant"],
        "poison": poison.get("kind", "none") if poison else "none",
        "final_acc": test[-1]["accuracy"],
        "best_acc": max(r["accuracy"] for r in test),
        "epochs": max(r["epoch"] for r in recs),
        "curve": [(r["epoch"], train_acc.get(r["epoch"]), r["accuracy"]) for r in test],
    }


REPORT_COLUMNS = ("run", "variant", "poison", "final_acc", "best_acc", "epochs")


def render_table(rows):
    cells = [REPORT_COLUMNS] + [tuple(_fmt(r[c]) for c in REPORT_COLUMNS) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_report(args):
    if not args.runs:
        raise ConfigError("report needs at least one run directory")
    rows = []
    for d in args.runs:
        row = _read_run(d)
        if row is None:
            log.warning("skipping %s: no metrics", d)
            continue
        rows.append(row)
    if not rows:
        raise ConfigError("none of the given directories holds a completed run")
    out = Path(args.out)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    (out / "report.csv").write_text(buf.getvalue())
    table = render_table(rows)
    (out / "report.txt").write_text(table)
    for r in rows:
        cb = io.StringIO()
        cw = csv.writer(cb, lineterminator="\n")
        cw.writerow(("epoch", "train_acc", "test_acc"))
        for e, tr, te in r["curve"]:
            cw.writerow((e, "" if tr is None else _fmt(tr), _fmt(te)))
        (out / "curves" / f"{r['run']}.csv").write_text(cb.getvalue())
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="ueraser", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-poison", help="generate a perturbation set")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_poison)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=T.VARIANTS)
    t.add_argument("--k", type=int, help="repeated samples per image")
    t.add_argument("--warmup", type=int, help="error-maximizing epochs")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="compare finished runs")
    r.add_argument("runs", nargs="*")
    r.add_argument("--out", default="report")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
