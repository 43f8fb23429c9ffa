"""Pure-numpy reference implementations of the hot kernels.

These are the fallback lane used when numba is unavailable or disabled via
``TTA_NUMBA=0``. The jitted lane in ``_numba.py`` mirrors each function
loop-for-loop; both lanes consume identical pre-drawn random inputs so a
given seed produces the same sampling decisions in either lane (float
reduction order may differ in the last ulps).
"""

import numpy as np


def softmax_rows(x):
    """Stabilized softmax over the last axis of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad(y, gout):
    """Adjoint of softmax_rows given its output y."""
    dot = (gout * y).sum(axis=1, keepdims=True)
    return y * (gout - dot)


def log_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def log_softmax_rows_grad(logy, gout):
    """Adjoint of log_softmax_rows given its output logy."""
    return gout - np.exp(logy) * gout.sum(axis=1, keepdims=True)


def layer_norm_rows(x, eps):
    """Row-wise normalization to zero mean / unit variance.

    Returns (y, rstd); rstd is saved for the backward pass.
    """
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return (x - mu) * rstd, rstd[:, 0]


def layer_norm_rows_grad(y, rstd, gout):
    gmean = gout.mean(axis=1, keepdims=True)
    proj = (gout * y).mean(axis=1, keepdims=True)
    return rstd[:, None] * (gout - gmean - y * proj)


def mix_rows(x0, z, coef_signal, coef_noise):
    """Per-row affine mix coef_signal[i]*x0[i] + coef_noise[i]*z[i].

    Rows with (coef_signal, coef_noise) == (1, 0) are copied bit-exactly so
    frozen tokens survive -0.0 and similar float quirks.
    """
    out = x0 * coef_signal[:, None] + z * coef_noise[:, None]
    frozen = (coef_signal == 1.0) & (coef_noise == 0.0)
    if frozen.any():
        out[frozen] = x0[frozen]
    return out


def topp_sample_rows(probs, p, u):
    """Sample one column per row from the renormalized top-p nucleus.

    probs rows must be valid distributions; u supplies one uniform in [0,1)
    per row so the caller controls the random stream.
    """
    n, v = probs.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        order = np.argsort(-probs[i], kind="stable")
        cum = np.cumsum(probs[i][order])
        m = min(int(np.searchsorted(cum, p, side="left")) + 1, v)
        target = u[i] * cum[m - 1]
        k = min(int(np.searchsorted(cum[:m], target, side="right")), m - 1)
        out[i] = order[k]
    return out


def trigram_nll(ids, logp, bos):
    """Total negative log-likelihood of a sequence under a trigram table.

    logp has shape (V+1, V+1, V) with index ``bos`` reserved for the two
    out-of-sequence context slots.
    """
    a = np.concatenate(([bos, bos], ids[:-2]))
    b = np.concatenate(([bos], ids[:-1]))
    return -float(logp[a, b, ids].sum())


def argmax_hits(w, y):
    """Count rows of w whose argmax lands on column y (ties -> lowest)."""
    return int((w.argmax(axis=1) == y).sum())
