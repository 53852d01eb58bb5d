"""Pure-Python/numpy implementations of the per-sample kernels.

Used when the compiled extension is not built, or when
``HARVEST_PURE_PYTHON=1`` is set.
"""
import math

import numpy as np


def softmax_row(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def target_conf(conf, targets):
    best = -math.inf
    for c in targets:
        v = conf[c]
        if v > best:
            best = v
    return float(best)


def sq_dist(a, b):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.dot(diff, diff))


def sq_dists(exemplars, x):
    diff = np.asarray(exemplars, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def median_sq_dist(exemplars, x):
    d = np.sort(sq_dists(exemplars, x))
    n = d.shape[0]
    if n == 0:
        raise ValueError("median of empty exemplar set")
    mid = n // 2
    if n % 2:
        return float(d[mid])
    return float(0.5 * (d[mid - 1] + d[mid]))


def xent_resid(logits, y, wts, resid):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(np.dot(wts, np.log(s[:, 0]) - z[rows, y]))
    np.multiply(e / s, wts[:, None], out=resid)
    resid[rows, y] -= wts
    return loss


def xent_grad(W, b, X, y, wts, l2, gW, gb):
    logits = X @ W.T + b
    resid = np.empty_like(logits)
    loss = xent_resid(logits, y, wts, resid) + 0.5 * l2 * float(np.vdot(W, W))
    gW[...] = resid.T @ X + l2 * W
    gb[...] = resid.sum(axis=0)
    return loss
