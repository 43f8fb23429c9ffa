"""Diagnostics for generation traces: per-step fluctuation, key-token
change (the update-forgetting proxy), confidence drop, distinct-n-gram
diversity, binned correlation, and the total-variation/KL lower bounds
derived from excess fluctuation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, MetricsError, TraceSchemaError
from .guidance import GenerationTrace


def fluctuation(prev, nxt) -> float:
    """Normalized Hamming distance between two token sequences."""
    prev = np.asarray(prev)
    nxt = np.asarray(nxt)
    if prev.shape != nxt.shape or prev.ndim != 1:
        raise ContractError(f"sequences must align, got {prev.shape} vs {nxt.shape}")
    return float(np.mean(prev != nxt))


def trigram_overlap_distance(prev, nxt) -> float:
    """1 - Jaccard overlap of the two sequences' trigram sets.

    A local, order-sensitive alternative to the Hamming distance for
    callers that want a cheap semantics-aware signal; the Hamming form
    stays the primary per-step measure.
    """
    prev = [int(x) for x in prev]
    nxt = [int(x) for x in nxt]
    if len(prev) < 3 or len(nxt) < 3:
        raise ContractError("trigram overlap needs sequences of length >= 3")
    a = {tuple(prev[i:i + 3]) for i in range(len(prev) - 2)}
    b = {tuple(nxt[i:i + 3]) for i in range(len(nxt) - 2)}
    return 1.0 - len(a & b) / len(a | b)


def step_fluctuation(trace: GenerationTrace, step: int, dist=None) -> float:
    """Fluctuation of one step: decoded noisy input vs decoded output.

    The distance is pluggable; the default is the normalized Hamming
    distance from :func:`fluctuation`.
    """
    r = trace.records[step]
    return (dist or fluctuation)(r.tokens_in, r.tokens)


def mean_fluctuation(trace: GenerationTrace, t: int) -> float:
    """Mean per-step fluctuation over steps from the start down to global
    timestep t (inclusive)."""
    if not trace.records:
        raise ContractError("empty trace")
    ts = [r.t_global for r in trace.records]
    if t > max(ts) or t < min(ts):
        raise ContractError(f"t={t} outside trace range [{min(ts)}, {max(ts)}]")
    vals = [step_fluctuation(trace, k) for k, r in enumerate(trace.records)
            if r.t_global >= t]
    return float(np.mean(vals))


def trace_mean_fluctuation(trace: GenerationTrace) -> float:
    vals = [step_fluctuation(trace, k) for k in range(len(trace.records))]
    return float(np.mean(vals))


def key_token_change(trace: GenerationTrace, step: int, k: int = 5) -> float:
    """Fraction of the step's top-k gradient-norm tokens whose decoded token
    differs between the guided output at this step and the next step's
    denoised output. The final step has no successor and reads 0."""
    r = trace.records[step]
    n = r.tokens.size
    if k > n or k < 1:
        raise ContractError(f"k must lie in [1, {n}]")
    if step >= len(trace.records) - 1:
        return 0.0
    key = np.argsort(-r.grad_norms, kind="stable")[:k]
    nxt = trace.records[step + 1]
    return float(np.mean(r.tokens[key] != nxt.tokens_denoised[key]))


def trace_mean_key_change(trace: GenerationTrace, k: int = 5) -> float:
    if len(trace.records) < 2:
        return 0.0
    vals = [key_token_change(trace, s, k) for s in range(len(trace.records) - 1)]
    return float(np.mean(vals))


def confidence_drop(trace: GenerationTrace, step: int) -> float:
    """Confidence right after guidance minus confidence just before the
    next guidance pass; positive values are forgotten updates."""
    r = trace.records[step]
    if r.conf_after_guidance is None or r.conf_before_next is None:
        raise TraceSchemaError(f"record {step} lacks confidence fields")
    return float(r.conf_after_guidance - r.conf_before_next)


def dist_n(samples, n: int = 3) -> float:
    """Distinct n-gram ratio pooled over all sequences."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    seen = set()
    total = 0
    for seq in samples:
        seq = tuple(int(x) for x in seq)
        for i in range(len(seq) - n + 1):
            seen.add(seq[i : i + n])
            total += 1
    if total == 0:
        raise MetricsError(f"no sequence long enough for {n}-grams")
    return len(seen) / total


def binned_correlation(x, y, bins: int = 10) -> float:
    """Pearson correlation of per-bin means after sorting by x and cutting
    into equal-count bins."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("x and y must be equal-length 1-D arrays")
    if bins < 2 or x.size < 2 * bins:
        raise ContractError(f"need at least {2 * bins} points for {bins} bins")
    order = np.argsort(x, kind="stable")
    bx = np.array([chunk.mean() for chunk in np.array_split(x[order], bins)])
    by = np.array([chunk.mean() for chunk in np.array_split(y[order], bins)])
    if bx.std() == 0 or by.std() == 0:
        raise MetricsError("correlation undefined for constant series")
    return float(np.corrcoef(bx, by)[0, 1])


@dataclass
class BoundReport:
    """Lower bounds implied by an excess-fluctuation measurement."""

    delta_r: float
    tv_lower: float
    kl_lower: float
    ce_bound_increment: float


def pinsker_bound(delta_r: float) -> BoundReport:
    """|dR| <= d_TV <= sqrt(KL/2), i.e. KL >= 2 dR^2; the same quantity is
    the per-unit-time increment forced into the cross-entropy bound."""
    if not -1.0 <= delta_r <= 1.0:
        raise ContractError(f"delta_r must lie in [-1, 1], got {delta_r}")
    kl = 2.0 * delta_r * delta_r
    return BoundReport(delta_r=delta_r, tv_lower=abs(delta_r), kl_lower=kl,
                       ce_bound_increment=kl)


# ---------------------------------------------------------------------------
# trace tables for the analyze command


def step_table(trace: GenerationTrace, k: int = 5) -> list[dict]:
    """Per-step metric rows matching the analyze CSV schema."""
    rows = []
    for s, r in enumerate(trace.records):
        guided = r.conf_after_guidance is not None and r.conf_before_next is not None
        rows.append({
            "step": r.step,
            "R_t": step_fluctuation(trace, s),
            "mean_R": mean_fluctuation(trace, r.t_global),
            "key_change_ratio": key_token_change(trace, s, min(k, r.tokens.size)),
            "conf_after": r.conf_after_guidance,
            "conf_before_next": r.conf_before_next,
            "drop": confidence_drop(trace, s) if guided else None,
        })
    return rows


def run_summary(traces, final_tokens, lm=None, bins: int = 10, k: int = 5) -> dict:
    """Cross-run aggregates: mean fluctuation, mean key change, dist-3,
    reference perplexity, and the fluctuation/perplexity binned correlation
    (None when the run set is too small)."""
    from .models import reference_perplexity

    fluc = [trace_mean_fluctuation(t) for t in traces]
    keych = [trace_mean_key_change(t, k) for t in traces]
    out = {
        "runs": len(fluc),
        "mean_fluctuation": float(np.mean(fluc)),
        "mean_key_change": float(np.mean(keych)),
        "dist3": dist_n(final_tokens, 3),
    }
    if lm is not None:
        ppl = [reference_perplexity(lm, ids) for ids in final_tokens]
        out["ppl"] = float(np.mean(ppl))
        if len(fluc) >= 2 * bins:
            try:
                out["binned_r"] = binned_correlation(fluc, ppl, bins)
            except MetricsError:
                out["binned_r"] = None
        else:
            out["binned_r"] = None
    else:
        out["ppl"] = None
        out["binned_r"] = None
    return out
