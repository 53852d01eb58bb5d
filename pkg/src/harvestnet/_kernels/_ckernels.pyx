# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-sample kernels. Same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, INFINITY

cnp.import_array()


def softmax_row(const double[::1] logits):
    cdef Py_ssize_t n = logits.shape[0], k
    cdef double m = -INFINITY, s = 0.0
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for k in range(n):
        if logits[k] > m:
            m = logits[k]
    for k in range(n):
        o[k] = exp(logits[k] - m)
        s += o[k]
    for k in range(n):
        o[k] /= s
    return out


def softmax_rows(const double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0], K = logits.shape[1], i, k
    cdef double m, s
    out = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        m = -INFINITY
        s = 0.0
        for k in range(K):
            if logits[i, k] > m:
                m = logits[i, k]
        for k in range(K):
            o[i, k] = exp(logits[i, k] - m)
            s += o[i, k]
        for k in range(K):
            o[i, k] /= s
    return out


def target_conf(const double[::1] conf, const Py_ssize_t[::1] targets):
    cdef Py_ssize_t j
    cdef double best = -INFINITY, v
    for j in range(targets.shape[0]):
        v = conf[targets[j]]
        if v > best:
            best = v
    return best


cdef inline double _sq(const double[::1] a, const double[::1] b) nogil:
    cdef Py_ssize_t k
    cdef double acc = 0.0, t
    for k in range(a.shape[0]):
        t = a[k] - b[k]
        acc += t * t
    return acc


def sq_dist(const double[::1] a, const double[::1] b):
    if a.shape[0] != b.shape[0]:
        raise ValueError("dimension mismatch")
    return _sq(a, b)


def sq_dists(const double[:, ::1] exemplars, const double[::1] x):
    cdef Py_ssize_t n = exemplars.shape[0], d = exemplars.shape[1], i, k
    cdef double acc, t
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        acc = 0.0
        for k in range(d):
            t = exemplars[i, k] - x[k]
            acc += t * t
        o[i] = acc
    return out


def median_sq_dist(const double[:, ::1] exemplars, const double[::1] x):
    cdef Py_ssize_t n = exemplars.shape[0], d = exemplars.shape[1], i, j, k
    cdef double acc, t, key
    if n == 0:
        raise ValueError("median of empty exemplar set")
    buf = np.empty(n, dtype=np.float64)
    cdef double[::1] dist = buf
    for i in range(n):
        acc = 0.0
        for k in range(d):
            t = exemplars[i, k] - x[k]
            acc += t * t
        # insertion sort: exemplar sets are small
        key = acc
        j = i - 1
        while j >= 0 and dist[j] > key:
            dist[j + 1] = dist[j]
            j -= 1
        dist[j + 1] = key
    if n % 2:
        return dist[n // 2]
    return 0.5 * (dist[n // 2 - 1] + dist[n // 2])


def xent_resid(const double[:, ::1] logits, const Py_ssize_t[::1] y, const double[::1] wts,
               double[:, ::1] resid):
    """Weighted cross-entropy of ``logits`` against ``y``; writes ``wts * (softmax - onehot)``
    into ``resid`` and returns the loss."""
    cdef Py_ssize_t n = logits.shape[0], K = logits.shape[1], i, k
    cdef double m, s, loss = 0.0, lse
    for i in range(n):
        m = -INFINITY
        for k in range(K):
            if logits[i, k] > m:
                m = logits[i, k]
        s = 0.0
        for k in range(K):
            resid[i, k] = exp(logits[i, k] - m)
            s += resid[i, k]
        lse = m + log(s)
        loss += wts[i] * (lse - logits[i, y[i]])
        for k in range(K):
            resid[i, k] = wts[i] * resid[i, k] / s
        resid[i, y[i]] -= wts[i]
    return loss


def xent_grad(const double[:, ::1] W, const double[::1] b, const double[:, ::1] X,
              const Py_ssize_t[::1] y, const double[::1] wts, double l2,
              double[:, ::1] gW, double[::1] gb):
    """Fully looped loss and gradient; faster than BLAS for narrow problems."""
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], K = W.shape[0], i, j, k
    cdef double m, s, loss = 0.0, acc, r
    cdef double[::1] z = np.empty(K, dtype=np.float64)
    cdef double delta, p1, e
    for k in range(K):
        gb[k] = 0.0
        for j in range(d):
            gW[k, j] = l2 * W[k, j]
            loss += 0.5 * l2 * W[k, j] * W[k, j]
    if K == 2:
        # two classes: softmax reduces to a sigmoid of the logit difference
        for i in range(n):
            delta = b[1] - b[0]
            for j in range(d):
                delta += (W[1, j] - W[0, j]) * X[i, j]
            e = exp(-fabs(delta))
            p1 = 1.0 / (1.0 + e) if delta >= 0 else e / (1.0 + e)
            # log(1 + exp(-|delta|)) plus the hinge part of the log-loss
            if y[i] == 1:
                loss += wts[i] * (log1p(e) + (-delta if delta < 0 else 0.0))
                r = wts[i] * (p1 - 1.0)
            else:
                loss += wts[i] * (log1p(e) + (delta if delta > 0 else 0.0))
                r = wts[i] * p1
            gb[1] += r
            gb[0] -= r
            for j in range(d):
                gW[1, j] += r * X[i, j]
                gW[0, j] -= r * X[i, j]
        return loss
    for i in range(n):
        m = -INFINITY
        for k in range(K):
            acc = b[k]
            for j in range(d):
                acc += W[k, j] * X[i, j]
            z[k] = acc
            if acc > m:
                m = acc
        s = 0.0
        for k in range(K):
            z[k] = exp(z[k] - m)
            s += z[k]
        loss += wts[i] * (m + log(s) - (log(z[y[i]]) + m))
        for k in range(K):
            r = wts[i] * z[k] / s
            if k == y[i]:
                r -= wts[i]
            gb[k] += r
            for j in range(d):
                gW[k, j] += r * X[i, j]
    return loss
