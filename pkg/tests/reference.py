"""Straightforward float64 re-implementation of SmallConvNet used as an oracle.

Deliberately shares no code with ``ueraser.ndgrad``: convolution is a direct sum
over kernel taps, pooling uses explicit slicing.
"""

import numpy as np


def conv_same(x, w, b):
    bs, c, h, wd = x.shape
    xp = np.zeros((bs, c, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((bs, w.shape[0], h, wd))
    for ki in range(3):
        for kj in range(3):
            patch = xp[:, :, ki:ki + h, kj:kj + wd]
            out += np.tensordot(w[:, :, ki, kj], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out + b[None, :, None, None]


def pool(x, pattern):
    quads = np.stack([x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
                      x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]])
    pattern.append(quads.argmax(axis=0))
    return quads.max(axis=0)


def relu(x, pattern):
    pattern.append(x > 0)
    return np.maximum(x, 0)


def ref_forward(arrays, x, return_pattern=False):
    a = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(len(x), -1)
    mu = flat.mean(axis=1)
    sd = np.maximum(flat.std(axis=1), 1 / np.sqrt(flat.shape[1]))
    x = (x - mu[:, None, None, None]) / sd[:, None, None, None]
    pattern = []
    h = pool(relu(conv_same(x, a["conv1.w"], a["conv1.b"]), pattern), pattern)
    h = pool(relu(conv_same(h, a["conv2.w"], a["conv2.b"]), pattern), pattern)
    z = h.reshape(len(x), -1) @ a["dense.w"].T + a["dense.b"]
    if return_pattern:
        return z, b"".join(np.ascontiguousarray(p).tobytes() for p in pattern)
    return z


def ref_mean_ce(arrays, x, y, return_pattern=False):
    z, pat = ref_forward(arrays, x, return_pattern=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    loss = float(np.mean(-np.log(p[np.arange(len(y)), y])))
    return (loss, pat) if return_pattern else loss


def fd_gradients(arrays, x, y, h=1e-3):
    """Central differences in float64 for every parameter entry.

    The ReLU/max-pool pattern is compared at both stencil points; where the
    stencil straddles a kink the step is shrunk until the pattern is stable,
    since the function is only smooth inside one activation region.
    Returns ({name: fd_grad}, number_of_refined_entries).
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    _, pat0 = ref_mean_ce(base, x, y, return_pattern=True)
    out, refined = {}, 0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            step = h
            while True:
                flat[i] = orig + step
                lp, pp = ref_mean_ce(base, x, y, return_pattern=True)
                flat[i] = orig - step
                lm, pm = ref_mean_ce(base, x, y, return_pattern=True)
                flat[i] = orig
                if (pp == pat0 and pm == pat0) or step < 1e-9:
                    break
                step /= 10
            refined += step != h
            fd[i] = (lp - lm) / (2 * step)
        out[name] = fd.reshape(arr.shape)
    return out, refined


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
