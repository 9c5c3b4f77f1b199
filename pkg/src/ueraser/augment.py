"""Augmentation policies: crop/flip, plasma fractal distortions, TrivialAugment
ops and channel shuffle, composed in that order.

A policy draw is materialized as a :class:`PolicySample` so that
``apply(sample, img)`` is a pure function and any augmented image can be
replayed bit-exactly from a log.  All stages also expose a vector-Jacobian
product (``apply_with_vjp``) so attackers can differentiate through the
pipeline; posterize and equalize are straight-through.

Images are float32 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np

from .rng import keyed_rng

# TrivialAugment op set and strength bins
TA_OPS = (
    "identity", "shear_x", "shear_y", "translate_x", "translate_y", "rotate",
    "brightness", "color", "contrast", "sharpness", "posterize", "solarize",
    "autocontrast", "equalize",
)
TA_BINS = 30
MAX_SHEAR = 0.3
MAX_TRANSLATE_FRAC = 1.0 / 3.0
MAX_ROTATE_DEG = 30.0
MAX_ENHANCE = 0.9           # factor range 1 -/+ 0.9
MIN_POSTERIZE_BITS = 2

PLASMA_P = 0.5
SHUFFLE_P = 0.5
ROUGHNESS_RANGE = (0.1, 0.7)
INTENSITY_RANGE = (0.0, 1.0)
CROP_PAD = 4

PERMUTATIONS = tuple(permutations(range(3)))
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], np.float32)

# pipeline components
CROP, PLASMA, TA, SHUFFLE = "crop", "plasma", "ta", "shuffle"
FULL_PIPELINE = frozenset({CROP, PLASMA, TA, SHUFFLE})
STANDARD = frozenset({CROP})


@dataclass(frozen=True)
class PolicySample:
    crop_dy: int = 0
    crop_dx: int = 0
    flip: bool = False
    plasma_on: bool = False
    plasma_kind: str = "brightness"
    roughness: float = 0.1
    intensity: float = 0.0
    field_seed: int = 0
    ta_op: str = "identity"
    ta_bin: int = 0
    ta_negate: bool = False
    shuffle_on: bool = False
    perm: tuple = (0, 1, 2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        d = json.loads(s) if isinstance(s, (str, bytes)) else dict(s)
        d["perm"] = tuple(d["perm"])
        return cls(**d)


IDENTITY = PolicySample()


def threads_from_env():
    try:
        return max(1, int(os.environ.get("UERASER_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- sampling

def sample_policy(key, components=FULL_PIPELINE, crop_pad=CROP_PAD) -> PolicySample:
    """Draw one pipeline instance from the stream keyed by ``key``.

    ``key`` is ``(seed, epoch, image_index, repeat)``.  Every field is drawn
    regardless of ``components`` so that the stream layout never changes;
    disabled components are then reset to identity.
    """
    seed, *counter = key
    rng = keyed_rng(seed, "augment", *counter)
    u = rng.random(10)
    field_seed = int(rng.integers(0, 2 ** 63))
    dy = int(u[0] * (2 * crop_pad + 1)) - crop_pad
    dx = int(u[1] * (2 * crop_pad + 1)) - crop_pad
    s = dict(
        crop_dy=dy, crop_dx=dx, flip=bool(u[2] < 0.5),
        plasma_on=bool(u[3] < PLASMA_P),
        plasma_kind="brightness" if u[4] < 0.5 else "contrast",
        roughness=float(ROUGHNESS_RANGE[0] + u[5] * (ROUGHNESS_RANGE[1] - ROUGHNESS_RANGE[0])),
        intensity=float(INTENSITY_RANGE[0] + u[6] * (INTENSITY_RANGE[1] - INTENSITY_RANGE[0])),
        field_seed=field_seed,
        ta_op=TA_OPS[int(u[7] * len(TA_OPS))],
        ta_bin=int(u[8] * (TA_BINS + 1)),
        ta_negate=bool(u[9] < 0.5),
        shuffle_on=bool(rng.random() < SHUFFLE_P),
        perm=PERMUTATIONS[int(rng.integers(0, 6))],
    )
    if CROP not in components:
        s.update(crop_dy=0, crop_dx=0, flip=False)
    if PLASMA not in components:
        s["plasma_on"] = False
    if TA not in components:
        s.update(ta_op="identity", ta_bin=0, ta_negate=False)
    if SHUFFLE not in components:
        s["shuffle_on"] = False
    return PolicySample(**s)


def sample_batch(seed, epoch, indices, repeat, components=FULL_PIPELINE):
    return [sample_policy((seed, epoch, int(i), repeat), components) for i in indices]


# ---------------------------------------------------------------- plasma

def diamond_square(k, roughness, u, amplitude=1.0, corners=None):
    """Diamond-square on a (2^k+1)^2 grid.

    ``u`` holds uniform [0, 1) draws with the grid's shape (leading batch axes
    allowed): corner entries seed the corners, every other entry gives that
    point's displacement ``amp * (u - 0.5)``.  ``amp`` starts at ``amplitude``
    and is multiplied by ``roughness`` after each subdivision level.
    """
    size = 2 ** k + 1
    u = np.asarray(u, dtype=np.float64)
    batch = u.shape[:-2]
    g = np.zeros(u.shape)
    noise = u - 0.5
    if corners is None:
        for i in (0, -1):
            for j in (0, -1):
                g[..., i, j] = u[..., i, j]
    else:
        g[..., 0, 0], g[..., 0, -1], g[..., -1, 0], g[..., -1, -1] = corners
    amp = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), batch)[..., None, None]
    rough = np.broadcast_to(np.asarray(roughness, dtype=np.float64), batch)[..., None, None]
    valid = np.zeros((size, size))
    valid[0, 0] = valid[0, -1] = valid[-1, 0] = valid[-1, -1] = 1
    step = size - 1
    while step > 1:
        h = step // 2
        # diamond: square centres from the four corners
        c = (g[..., 0:-1:step, 0:-1:step] + g[..., step::step, 0:-1:step]
             + g[..., 0:-1:step, step::step] + g[..., step::step, step::step]) / 4
        g[..., h::step, h::step] = c + amp * noise[..., h::step, h::step]
        valid[h::step, h::step] = 1
        # square: edge midpoints from the available up/down/left/right points
        pad = [(0, 0)] * len(batch) + [(h, h), (h, h)]
        gp = np.pad(g, pad)
        vp = np.pad(valid, h)
        for r0, c0 in ((h, 0), (0, h)):
            rs = slice(r0 + h, size + h, step)
            cs = slice(c0 + h, size + h, step)
            total = 0
            count = 0
            for dr, dc in ((-h, 0), (h, 0), (0, -h), (0, h)):
                rr = slice(rs.start + dr, rs.stop + dr, step)
                cc = slice(cs.start + dc, cs.stop + dc, step)
                total = total + gp[..., rr, cc]
                count = count + vp[rr, cc]
            g[..., r0::step, c0::step] = total / count + amp * noise[..., r0::step, c0::step]
        valid[h::step, 0::step] = valid[0::step, h::step] = 1
        amp = amp * rough
        step = h
    return g


def _normalize_fields(g):
    lo = g.min(axis=(-2, -1), keepdims=True)
    hi = g.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    flat = span <= 0
    out = np.where(flat, 0.5, (g - lo) / np.where(flat, 1.0, span))
    return out


def _grid_order(h, w):
    return max(1, int(np.ceil(np.log2(max(h, w) - 1)))) if max(h, w) > 2 else 1


def plasma_field(h, w, roughness, seed):
    """[0, 1] fractal field of shape (h, w), deterministic in (h, w, roughness, seed)."""
    return plasma_fields(h, w, [roughness], [seed])[0]


def plasma_fields(h, w, roughness, seeds):
    if h < 2 or w < 2:
        raise ValueError("plasma field needs H, W >= 2")
    k = _grid_order(h, w)
    size = 2 ** k + 1
    u = np.stack([keyed_rng(int(s), "plasma").random((size, size)) for s in seeds])
    g = diamond_square(k, np.asarray(roughness, dtype=np.float64), u)
    return _normalize_fields(g)[:, :h, :w].astype(np.float32)


def plasma_brightness(img, intensity, field):
    return _plasma_brightness(img, intensity, field)[0]


def _plasma_brightness(img, intensity, field):
    pre = img + np.float32(intensity) * (2 * field - 1)[None]
    mask = (pre >= 0) & (pre <= 1)
    return np.clip(pre, 0, 1).astype(np.float32), lambda g: g * mask


def plasma_contrast(img, field):
    return _plasma_contrast(img, field)[0]


def _plasma_contrast(img, field):
    gain = np.exp(2 * field - 1).astype(np.float32)[None]
    pre = 0.5 + (img - 0.5) * gain
    mask = (pre >= 0) & (pre <= 1)
    return np.clip(pre, 0, 1).astype(np.float32), lambda g: g * gain * mask


# ---------------------------------------------------------------- channel shuffle

def _check_perm(perm):
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != [0, 1, 2]:
        raise ValueError(f"{perm} is not a permutation of (0, 1, 2)")
    return perm


def channel_shuffle(img, perm):
    """Output channel i is input channel perm[i]."""
    perm = _check_perm(perm)
    return img[list(perm)]


def _channel_shuffle(img, perm):
    perm = list(_check_perm(perm))
    inv = np.argsort(perm)
    return img[perm], lambda g: g[inv]


# ---------------------------------------------------------------- crop / flip

def _shift(img, dy, dx):
    """out[y, x] = img[y + dy, x + dx], zero outside."""
    _, h, w = img.shape
    out = np.zeros_like(img)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def _crop_flip(img, dy, dx, flip):
    out = _shift(img, dy, dx) if (dy or dx) else img
    if flip:
        out = out[:, :, ::-1]

    def vjp(g):
        if flip:
            g = g[:, :, ::-1]
        return _shift(g, -dy, -dx) if (dy or dx) else g

    return np.ascontiguousarray(out), vjp


# ---------------------------------------------------------------- TrivialAugment

def ta_magnitude(bin_, negate=False):
    m = bin_ / TA_BINS
    return -m if negate else m


@lru_cache(maxsize=16)
def _pixel_grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def _warp(img, a, t):
    """Bilinear sample img at src = a @ (x, y) + t with zero padding."""
    _, h, w = img.shape
    xs, ys = _pixel_grid(h, w)
    sx = a[0, 0] * xs + a[0, 1] * ys + t[0]
    sy = a[1, 0] * xs + a[1, 1] * ys + t[1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for oy, ox, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + oy, x0 + ox
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wt != 0)
        idx = np.where(ok, yy * w + xx, 0).ravel()
        taps.append((idx, np.where(ok, wt, 0.0).ravel()))
    flat = img.reshape(3, -1).astype(np.float64)
    out = np.zeros((3, h * w))
    for idx, wt in taps:
        out += flat[:, idx] * wt
    out = out.reshape(3, h, w).astype(np.float32)

    def vjp(g):
        gf = g.reshape(3, -1).astype(np.float64)
        gin = np.zeros((3, h * w))
        for idx, wt in taps:
            for c in range(3):
                gin[c] += np.bincount(idx, weights=gf[c] * wt, minlength=h * w)
        return gin.reshape(3, h, w).astype(np.float32)

    return out, vjp


def _centered(a, h, w):
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return a, c - a @ c


def _gray(img):
    return np.tensordot(GRAY_WEIGHTS, img, axes=1)


def _blend_vjp(f, other_vjp):
    return lambda g: f * g + (1 - f) * other_vjp(g)


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], np.float32) / 13


def _smooth(img):
    """PIL-style SMOOTH filter on the interior, border pixels untouched."""
    out = img.copy()
    _, h, w = img.shape
    acc = np.zeros((3, h - 2, w - 2), np.float32)
    for i in range(3):
        for j in range(3):
            acc += _SMOOTH[i, j] * img[:, i:i + h - 2, j:j + w - 2]
    out[:, 1:-1, 1:-1] = acc
    return out


def _smooth_adjoint(g):
    _, h, w = g.shape
    out = g.copy()
    out[:, 1:-1, 1:-1] = 0
    inner = g[:, 1:-1, 1:-1]
    for i in range(3):
        for j in range(3):
            out[:, i:i + h - 2, j:j + w - 2] += _SMOOTH[i, j] * inner
    return out


def _equalize_channel(ch):
    levels = np.rint(ch * 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256)
    nz = hist[hist > 0]
    if len(nz) <= 1:
        return ch
    step = (nz.sum() - nz[-1]) // 255
    if step == 0:
        return ch
    lut = np.minimum((step // 2 + np.concatenate([[0], np.cumsum(hist)[:-1]])) // step, 255)
    return (lut[levels] / 255.0).astype(np.float32)


def _ta(img, op, bin_, negate):
    if op not in TA_OPS:
        raise ValueError(f"unknown TrivialAugment op {op!r}")
    if not 0 <= bin_ <= TA_BINS:
        raise ValueError(f"bin {bin_} outside [0, {TA_BINS}]")
    _, h, w = img.shape
    m = ta_magnitude(bin_, negate)
    ident = lambda g: g  # noqa: E731
    if op == "identity":
        return img, ident
    if op in ("shear_x", "shear_y", "translate_x", "translate_y", "rotate"):
        if op == "shear_x":
            a, t = _centered(np.array([[1.0, MAX_SHEAR * m], [0.0, 1.0]]), h, w)
        elif op == "shear_y":
            a, t = _centered(np.array([[1.0, 0.0], [MAX_SHEAR * m, 1.0]]), h, w)
        elif op == "translate_x":
            a, t = np.eye(2), np.array([-MAX_TRANSLATE_FRAC * w * m, 0.0])
        elif op == "translate_y":
            a, t = np.eye(2), np.array([0.0, -MAX_TRANSLATE_FRAC * h * m])
        else:
            th = np.deg2rad(MAX_ROTATE_DEG * m)
            # inverse map of a rotation by th about the centre
            a, t = _centered(np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]]), h, w)
        out, vjp = _warp(img, a, t)
    elif op in ("brightness", "color", "contrast", "sharpness"):
        f = np.float32(1 + MAX_ENHANCE * m)
        if op == "brightness":
            out, vjp = img * f, (lambda g: g * f)
        elif op == "color":
            gray = _gray(img)[None]
            out = gray + f * (img - gray)
            vjp = _blend_vjp(f, lambda g: GRAY_WEIGHTS[:, None, None] * g.sum(axis=0, keepdims=True))
        elif op == "contrast":
            mu = np.float32(_gray(img).mean())
            out = mu + f * (img - mu)
            hw = h * w
            vjp = _blend_vjp(f, lambda g: np.broadcast_to(
                GRAY_WEIGHTS[:, None, None] * (g.sum() / hw), g.shape).astype(np.float32))
        else:
            blur = _smooth(img)
            out = blur + f * (img - blur)
            vjp = _blend_vjp(f, _smooth_adjoint)
    elif op == "posterize":
        bits = 8 - int(round((8 - MIN_POSTERIZE_BITS) * bin_ / TA_BINS))
        mask = ~((1 << (8 - bits)) - 1) & 0xFF
        out = (np.rint(img * 255).astype(np.int64) & mask).astype(np.float32) / 255
        vjp = ident
    elif op == "solarize":
        thr = 1.0 - bin_ / TA_BINS
        hit = img >= thr
        out = np.where(hit, 1 - img, img)
        vjp = lambda g: np.where(hit, -g, g)  # noqa: E731
    elif op == "autocontrast":
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        span = hi - lo
        ok = span > 0
        scale = np.where(ok, 1 / np.where(ok, span, 1), 1).astype(np.float32)
        out = np.where(ok, (img - lo) * scale, img)
        vjp = lambda g: g * scale  # noqa: E731
    else:
        out = np.stack([_equalize_channel(c) for c in img])
        vjp = ident
    out = np.asarray(out, dtype=np.float32)
    mask = (out >= 0) & (out <= 1)
    return np.clip(out, 0, 1), (lambda g: vjp(g * mask))


def trivial_augment(img, op, bin_, negate=False):
    return _ta(np.asarray(img, dtype=np.float32), op, int(bin_), negate)[0]


# ---------------------------------------------------------------- pipeline

def _stages(sample, img, field=None):
    _, h, w = img.shape
    vjps = []
    x = img
    if sample.crop_dy or sample.crop_dx or sample.flip:
        x, v = _crop_flip(x, sample.crop_dy, sample.crop_dx, sample.flip)
        vjps.append(v)
    if sample.plasma_on:
        if field is None:
            field = plasma_field(h, w, sample.roughness, sample.field_seed)
        if sample.plasma_kind == "brightness":
            x, v = _plasma_brightness(x, sample.intensity, field)
        else:
            x, v = _plasma_contrast(x, field)
        vjps.append(v)
    if sample.ta_op != "identity":
        x, v = _ta(x, sample.ta_op, sample.ta_bin, sample.ta_negate)
        vjps.append(v)
    if sample.shuffle_on:
        x, v = _channel_shuffle(x, sample.perm)
        vjps.append(v)
    return x, vjps


def apply(sample: PolicySample, img):
    """Deterministic application of a materialized policy to one image."""
    img = np.asarray(img, dtype=np.float32)
    return np.ascontiguousarray(_stages(sample, img)[0], dtype=np.float32)


def apply_with_vjp(sample: PolicySample, img):
    """Return (augmented, vjp) where vjp maps d/d(out) to d/d(img)."""
    img = np.asarray(img, dtype=np.float32)
    out, vjps = _stages(sample, img)

    def vjp(g):
        g = np.asarray(g, dtype=np.float32)
        for v in reversed(vjps):
            g = v(g)
        return np.asarray(g, dtype=np.float32)

    return np.ascontiguousarray(out, dtype=np.float32), vjp


def _batch_fields(samples, h, w):
    idx = [i for i, s in enumerate(samples) if s.plasma_on]
    fields = [None] * len(samples)
    if idx:
        fs = plasma_fields(h, w, [samples[i].roughness for i in idx],
                           [samples[i].field_seed for i in idx])
        for i, f in zip(idx, fs):
            fields[i] = f
    return fields


def augment_batch(samples, images, threads=None, with_vjp=False):
    """Apply samples[i] to images[i]; parallel over images, order-independent.

    With ``with_vjp`` returns (out, vjp) where vjp maps a batch of output
    cotangents to input cotangents.
    """
    images = np.asarray(images, dtype=np.float32)
    _, _, h, w = images.shape
    fields = _batch_fields(samples, h, w)
    threads = threads_from_env() if threads is None else threads

    def one(i):
        return _stages(samples[i], images[i], fields[i])

    if threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(len(samples))))
    else:
        results = [one(i) for i in range(len(samples))]
    out = np.stack([r[0] for r in results]).astype(np.float32) if results else images.copy()
    if not with_vjp:
        return out

    def vjp(g):
        gs = []
        for (_, vs), gi in zip(results, np.asarray(g, dtype=np.float32)):
            for v in reversed(vs):
                gi = v(gi)
            gs.append(gi)
        return np.stack(gs).astype(np.float32)

    return out, vjp
