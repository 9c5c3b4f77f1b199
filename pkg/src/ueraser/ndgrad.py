"""Tape-based reverse-mode differentiation for the small conv classifier.

Only the handful of ops that ``SmallConvNet`` needs are provided.  Ops record a
vector-Jacobian product on the active :class:`GradTape`; without an active tape
they are plain numpy computations.  The network standardizes each input image
(zero mean, unit standard deviation) before the first convolution, so global
brightness and contrast changes do not reach the features.

    >>> params = init_params((3, 16, 16), num_classes=4, seed=0)
    >>> with GradTape() as tape:
    ...     losses = cross_entropy(forward(params, x), y)
    ...     loss = mean(losses)
    >>> grads = tape.backward(loss)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor", "GradTape", "ModelParams", "ConfigError", "StateError",
    "NonFiniteUpdate", "init_params", "forward", "cross_entropy", "mean",
    "backward", "sgd_step", "clip_grad_norm", "save_checkpoint",
    "load_checkpoint", "softmax",
]

ARCH_NAME = "SmallConvNet"
CKPT_MAGIC = b"UERM"
CKPT_VERSION = 1
PARAM_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "dense.w", "dense.b")


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteUpdate(FloatingPointError):
    def __init__(self, param, epoch=None, batch=None):
        self.param, self.epoch, self.batch = param, epoch, batch
        super().__init__(f"non-finite update in {param!r} (epoch={epoch}, batch={batch})")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


class GradTape:
    """Wengert list of the ops run while the tape is active."""

    _active: list["GradTape"] = []

    def __init__(self):
        self._nodes = []
        self._leaves = {}

    def __enter__(self):
        GradTape._active.append(self)
        return self

    def __exit__(self, *exc):
        GradTape._active.remove(self)

    @classmethod
    def current(cls):
        return cls._active[-1] if cls._active else None

    def watch(self, t: Tensor):
        t.requires_grad = True
        self._leaves[id(t)] = t
        return t

    def record(self, out, inputs, vjp):
        self._nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every watched leaf; return {name: grad}."""
        if not self._nodes:
            raise StateError("backward called without a recorded forward pass")
        if loss.data.size != 1:
            raise StateError("backward expects a scalar loss")
        cot = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = cot.pop(id(out), None)
            if g is None:
                continue
            needs = tuple(_needs_grad(t) for t in inputs)
            for t, gi, need in zip(inputs, vjp(g, needs), needs):
                if not need or gi is None:
                    continue
                if id(t) in cot:
                    cot[id(t)] = cot[id(t)] + gi
                else:
                    cot[id(t)] = gi
        grads = {}
        for key, leaf in self._leaves.items():
            g = cot.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.astype(leaf.data.dtype, copy=False)
            if leaf.name is not None:
                grads[leaf.name] = leaf.grad
        self._nodes.clear()
        self._leaves.clear()
        return grads


def backward(tape: GradTape, loss: Tensor):
    return tape.backward(loss)


def _needs_grad(t):
    return isinstance(t, Tensor) and t.requires_grad


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, vjp):
    out = Tensor(out_data)
    tape = GradTape.current()
    if tape is not None and any(_needs_grad(t) for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------- ops
# Activations run channels-last (NHWC) internally; the model API is NCHW.

def transpose(x: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return _record(y, (x,), lambda g, needs: (np.ascontiguousarray(g.transpose(inv)),))


def standardize(x: Tensor) -> Tensor:
    """Per-sample (x - mean) / max(std, 1/sqrt(n)) over all non-batch axes."""
    axes = tuple(range(1, x.data.ndim))
    n = int(np.prod(x.shape[1:]))
    d = x.data.astype(np.float64)
    xc = d - d.mean(axis=axes, keepdims=True)
    std = np.sqrt((xc * xc).mean(axis=axes, keepdims=True))
    floored = std < 1.0 / np.sqrt(n)
    scale = np.where(floored, np.sqrt(n), 1.0 / np.maximum(std, 1e-30))
    y = xc * scale

    def vjp(g, needs):
        g = g.astype(np.float64)
        gc = g - g.mean(axis=axes, keepdims=True)
        # the std term only carries gradient where the floor is inactive
        proj = np.where(floored, 0.0, (g * y).mean(axis=axes, keepdims=True))
        return ((gc - y * proj) * scale).astype(np.float32),

    return _record(y.astype(np.float32), (x,), vjp)


def _im2col(xp, h, w):
    """(B, H+2, W+2, C) padded -> (B*H*W, 9*C), columns ordered (ki, kj, c)."""
    cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=-1)
    return cols.reshape(-1, cols.shape[-1])


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 zero-padded ('same') 3x3 convolution on NHWC input; w is (O, C, 3, 3)."""
    bs, h, wd, c = x.shape
    o = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, h, wd)
    w2 = w.data.transpose(0, 2, 3, 1).reshape(o, 9 * c)
    y = (cols @ w2.T + b.data).reshape(bs, h, wd, o)

    def vjp(g, needs):
        g2 = g.reshape(-1, o)
        dx = dw = db = None
        if needs[0]:
            dcols = (g2 @ w2).reshape(bs, h, wd, 9, c)
            dxp = np.zeros((bs, h + 2, wd + 2, c), dtype=g.dtype)
            for t in range(9):
                i, j = divmod(t, 3)
                dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, t, :]
            dx = dxp[:, 1:-1, 1:-1, :]
        if needs[1]:
            dw = (g2.T @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
        if needs[2]:
            db = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return dx, dw, db

    return _record(y, (x, w, b), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g, needs: (g * mask,))


def maxpool2(x: Tensor) -> Tensor:
    """2x2/2 max pooling on NHWC; the gradient goes to the first maximal entry."""
    bs, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    quads = (x.data[:, 0::2, 0::2], x.data[:, 0::2, 1::2], x.data[:, 1::2, 0::2], x.data[:, 1::2, 1::2])
    y = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    masks = []
    taken = np.zeros(y.shape, bool)
    for q in quads:
        m = (q == y) & ~taken
        taken |= m
        masks.append(m)

    def vjp(g, needs):
        dx = np.empty(x.shape, dtype=g.dtype)
        dx[:, 0::2, 0::2] = g * masks[0]
        dx[:, 0::2, 1::2] = g * masks[1]
        dx[:, 1::2, 0::2] = g * masks[2]
        dx[:, 1::2, 1::2] = g * masks[3]
        return (dx,)

    return _record(y, (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(x.data.reshape(shape[0], -1), (x,), lambda g, needs: (g.reshape(shape),))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = x.data @ w.data.T + b.data

    def vjp(g, needs):
        dx = g @ w.data if needs[0] else None
        dw = g.T @ x.data if needs[1] else None
        db = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if needs[2] else None
        return dx, dw, db

    return _record(y, (x, w, b), vjp)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-example softmax cross-entropy; log-sum-exp evaluated in float64."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    bs, c = logits.shape
    if labels.shape != (bs,):
        raise ConfigError(f"labels shape {labels.shape} does not match batch {bs}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(bs)
    loss = lse - z[rows, labels]

    def vjp(g, needs):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * g.astype(np.float64)[:, None]).astype(logits.data.dtype),)

    return _record(loss.astype(logits.data.dtype), (logits,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    val = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype)
    return _record(val, (x,), lambda g, needs: (np.full(x.shape, g / n, dtype=x.data.dtype),))


# ---------------------------------------------------------------- model

class ModelParams:
    """Named SmallConvNet parameters plus SGD momentum buffers."""

    def __init__(self, arrays, in_shape, num_classes, momentum=None):
        self.arrays = dict(arrays)
        self.in_shape = tuple(int(v) for v in in_shape)
        self.num_classes = int(num_classes)
        self.momentum = momentum if momentum is not None else {
            k: np.zeros_like(v) for k, v in self.arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.in_shape,
                           self.num_classes, {k: v.copy() for k, v in self.momentum.items()})

    def descriptor(self):
        return {"arch": ARCH_NAME, "in_shape": list(self.in_shape), "num_classes": self.num_classes}

    def n_params(self):
        return sum(v.size for v in self.arrays.values())


def param_shapes(in_shape, num_classes):
    c, h, w = in_shape
    if c != 3 or h % 4 or w % 4 or h < 4 or w < 4:
        raise ConfigError(f"input shape {in_shape} must be (3, H, W) with H, W divisible by 4")
    return {
        "conv1.w": (16, 3, 3, 3), "conv1.b": (16,),
        "conv2.w": (32, 16, 3, 3), "conv2.b": (32,),
        "dense.w": (num_classes, 32 * (h // 4) * (w // 4)), "dense.b": (num_classes,),
    }


def init_params(in_shape, num_classes, seed=0) -> ModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(in_shape, num_classes).items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, np.float32)
        else:
            bound = np.sqrt(6.0 / int(np.prod(shape[1:])))
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ModelParams(arrays, in_shape, num_classes)


def forward(params: ModelParams, batch) -> Tensor:
    """Logits [B, C].  Parameters are watched when a tape is active."""
    x = _as_tensor(batch)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != params.in_shape:
        raise ConfigError(f"batch shape {x.shape} incompatible with model input {params.in_shape}")
    tape = GradTape.current()
    p = {}
    for name, arr in params.arrays.items():
        t = Tensor(arr, name=name)
        if tape is not None:
            tape.watch(t)
        p[name] = t
    h = transpose(standardize(x), (0, 2, 3, 1))
    h = maxpool2(relu(conv3x3(h, p["conv1.w"], p["conv1.b"])))
    h = maxpool2(relu(conv3x3(h, p["conv2.w"], p["conv2.b"])))
    # flatten in (C, H, W) order
    h = transpose(h, (0, 3, 1, 2))
    return dense(flatten(h), p["dense.w"], p["dense.b"])


def predict_logits(params: ModelParams, images, batch_size=512):
    out = [forward(params, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.num_classes), np.float32)


# ---------------------------------------------------------------- optimizer

def clip_grad_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = np.float32(max_norm / total)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def sgd_step(params: ModelParams, grads, lr, momentum=0.9, weight_decay=5e-4):
    """Classic SGD: v <- mu*v + g + wd*theta; theta <- theta - lr*v (in place)."""
    lr, momentum, weight_decay = np.float32(lr), np.float32(momentum), np.float32(weight_decay)
    updates = {}
    for name, theta in params.arrays.items():
        g = grads[name]
        v = momentum * params.momentum[name] + g + weight_decay * theta
        new = theta - lr * v
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new))):
            raise NonFiniteUpdate(name)
        updates[name] = (new.astype(np.float32), v.astype(np.float32))
    for name, (new, v) in updates.items():
        params.arrays[name] = new
        params.momentum[name] = v


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, extra=None):
    """Write magic, version, JSON descriptor, then named float32 LE sections."""
    desc = params.descriptor()
    if extra:
        desc.update(extra)
    desc_b = json.dumps(desc, sort_keys=True).encode()
    sections = [(k, params.arrays[k]) for k in PARAM_ORDER]
    sections += [("momentum/" + k, params.momentum[k]) for k in PARAM_ORDER]
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(desc_b)))
        f.write(desc_b)
        f.write(struct.pack("<I", len(sections)))
        for name, arr in sections:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)) + nb)
            f.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return (ModelParams, descriptor dict)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    version, dlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    desc = json.loads(raw[off:off + dlen])
    off += dlen
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays, mom = {}, {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", raw, off)
        name = raw[off + 4:off + 4 + ln].decode()
        off += 4 + ln
        (nd,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{nd}I", raw, off + 4)
        off += 4 + 4 * nd
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        if name.startswith("momentum/"):
            mom[name[len("momentum/"):]] = arr
        else:
            arrays[name] = arr
    if desc.get("arch") != ARCH_NAME:
        raise ConfigError(f"{path}: unknown architecture {desc.get('arch')!r}")
    return ModelParams(arrays, desc["in_shape"], desc["num_classes"], mom or None), desc
