"""Pure-numpy versions of the pairwise kernels, used when the extension is not built."""

import numpy as np

_CHUNK = 1024


def pair_velocity(x, p, q):
    m = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    r = np.sqrt(np.einsum("ikj,ikj->ik", diff, diff))
    off = ~np.eye(m, dtype=bool)
    hit = (r == 0.0) & off
    if hit.any():
        if p <= 0.0:
            i, k = np.argwhere(hit)[0]
            return np.zeros_like(x), int(min(i, k)), int(max(i, k))
        off &= ~hit
    rs = np.where(off, r, 1.0)
    coef = np.where(off, (rs**p - rs**q) / rs, 0.0)
    v = np.einsum("ik,ikj->ij", coef, diff)
    return v / m, -1, -1


def pair_energy(x, p, q):
    m = x.shape[0]
    iu = np.triu_indices(m, k=1)
    diff = x[iu[0]] - x[iu[1]]
    r = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    total = np.sum(r ** (q + 1.0) / (q + 1.0) - r ** (p + 1.0) / (p + 1.0))
    return float(total) / (m * m)


def chamfer(a, b):
    best_a = np.empty(a.shape[0])
    best_b = np.full(b.shape[0], np.inf)
    for start in range(0, a.shape[0], _CHUNK):
        blk = a[start:start + _CHUNK]
        d2 = np.sum((blk[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        best_a[start:start + _CHUNK] = d2.min(axis=1)
        np.minimum(best_b, d2.min(axis=0), out=best_b)
    return float(best_a.sum() + best_b.sum())
