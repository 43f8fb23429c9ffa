"""Numba-jitted lane of the hot kernels.

Each function mirrors its counterpart in ``_numpy.py``. Loops are written
out explicitly so numba can fuse the passes; fastmath stays off to keep
results reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_rows(x):
    n, v = x.shape
    out = np.empty((n, v))
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            e = np.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(v):
            out[i, j] /= s
    return out


@njit(cache=True)
def softmax_rows_grad(y, gout):
    n, v = y.shape
    gx = np.empty((n, v))
    for i in range(n):
        dot = 0.0
        for j in range(v):
            dot += gout[i, j] * y[i, j]
        for j in range(v):
            gx[i, j] = y[i, j] * (gout[i, j] - dot)
    return gx


@njit(cache=True)
def log_softmax_rows(x):
    n, v = x.shape
    out = np.empty((n, v))
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            s += np.exp(x[i, j] - m)
        lse = np.log(s)
        for j in range(v):
            out[i, j] = x[i, j] - m - lse
    return out


@njit(cache=True)
def log_softmax_rows_grad(logy, gout):
    n, v = logy.shape
    gx = np.empty((n, v))
    for i in range(n):
        s = 0.0
        for j in range(v):
            s += gout[i, j]
        for j in range(v):
            gx[i, j] = gout[i, j] - np.exp(logy[i, j]) * s
    return gx


@njit(cache=True)
def layer_norm_rows(x, eps):
    n, v = x.shape
    out = np.empty((n, v))
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(v):
            mu += x[i, j]
        mu /= v
        var = 0.0
        for j in range(v):
            d = x[i, j] - mu
            var += d * d
        var /= v
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(v):
            out[i, j] = (x[i, j] - mu) * r
    return out, rstd


@njit(cache=True)
def layer_norm_rows_grad(y, rstd, gout):
    n, v = y.shape
    gx = np.empty((n, v))
    for i in range(n):
        gmean = 0.0
        proj = 0.0
        for j in range(v):
            gmean += gout[i, j]
            proj += gout[i, j] * y[i, j]
        gmean /= v
        proj /= v
        for j in range(v):
            gx[i, j] = rstd[i] * (gout[i, j] - gmean - y[i, j] * proj)
    return gx


@njit(cache=True)
def mix_rows(x0, z, coef_signal, coef_noise):
    n, v = x0.shape
    out = np.empty((n, v))
    for i in range(n):
        if coef_signal[i] == 1.0 and coef_noise[i] == 0.0:
            for j in range(v):
                out[i, j] = x0[i, j]
        else:
            for j in range(v):
                out[i, j] = coef_signal[i] * x0[i, j] + coef_noise[i] * z[i, j]
    return out


@njit(cache=True)
def topp_sample_rows(probs, p, u):
    n, v = probs.shape
    out = np.empty(n, dtype=np.int64)
    order = np.empty(v, dtype=np.int64)
    cum = np.empty(v)
    for i in range(n):
        # stable insertion sort, descending by prob, ties by column index
        for j in range(v):
            order[j] = j
        for j in range(1, v):
            key = order[j]
            kp = probs[i, key]
            k = j - 1
            while k >= 0 and probs[i, order[k]] < kp:
                order[k + 1] = order[k]
                k -= 1
            order[k + 1] = key
        s = 0.0
        for j in range(v):
            s += probs[i, order[j]]
            cum[j] = s
        m = v
        for j in range(v):
            if cum[j] >= p:
                m = j + 1
                break
        target = u[i] * cum[m - 1]
        k = 0
        while k < m - 1 and cum[k] <= target:
            k += 1
        out[i] = order[k]
    return out


@njit(cache=True)
def trigram_nll(ids, logp, bos):
    total = 0.0
    n = ids.shape[0]
    for j in range(n):
        a = ids[j - 2] if j >= 2 else bos
        b = ids[j - 1] if j >= 1 else bos
        total -= logp[a, b, ids[j]]
    return total


@njit(cache=True)
def argmax_hits(w, y):
    n, v = w.shape
    hits = 0
    for i in range(n):
        best = 0
        bv = w[i, 0]
        for j in range(1, v):
            if w[i, j] > bv:
                bv = w[i, j]
                best = j
        if best == y:
            hits += 1
    return hits
