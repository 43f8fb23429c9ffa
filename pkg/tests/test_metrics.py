"""Metric unit tests: closed forms, hand-built traces, the permutation null
for binned correlation, and the brute-force check that the excess-fluctuation
KL bound never exceeds the true KL."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tta.errors import ContractError, MetricsError, TraceSchemaError
from tta.guidance import GenerationTrace, StepRecord
from tta.metrics import (
    binned_correlation,
    confidence_drop,
    dist_n,
    fluctuation,
    key_token_change,
    mean_fluctuation,
    pinsker_bound,
    step_fluctuation,
    trace_mean_fluctuation,
)


def make_record(step, tokens_in, tokens, grad_norms=None, t_global=None,
                conf_after=None, conf_before_next=None, tokens_denoised=None):
    tokens = np.asarray(tokens)
    n = tokens.size
    return StepRecord(
        step=step,
        t_global=t_global if t_global is not None else 100 - step,
        plan=np.zeros(n, dtype=np.int64),
        tokens=tokens,
        tokens_in=np.asarray(tokens_in),
        tokens_denoised=np.asarray(tokens_denoised if tokens_denoised is not None else tokens),
        grad_norms=np.asarray(grad_norms if grad_norms is not None else np.zeros(n), dtype=float),
        key_tokens=np.empty(0, dtype=np.int64),
        conf_after_guidance=conf_after,
        conf_before_next=conf_before_next,
        conf_after_raw=None,
        seed_digest="x",
    )


def test_fluctuation_examples():
    assert fluctuation([1, 2, 3], [1, 2, 3]) == 0.0
    assert fluctuation([1, 2], [3, 4]) == 1.0
    assert fluctuation([1, 2, 3, 4], [1, 9, 3, 9]) == 0.5


def test_fluctuation_length_mismatch():
    with pytest.raises(ContractError):
        fluctuation([1, 2], [1, 2, 3])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=12),
       st.integers(0, 10**6), st.integers(0, 10**6))
@settings(max_examples=150, deadline=None)
def test_fluctuation_is_a_metric(base, s1, s2):
    n = len(base)
    a = np.asarray(base)
    b = np.random.default_rng(s1).integers(0, 6, n)
    c = np.random.default_rng(s2).integers(0, 6, n)
    assert fluctuation(a, b) == fluctuation(b, a)
    assert (fluctuation(a, b) == 0.0) == bool(np.array_equal(a, b))
    assert fluctuation(a, c) <= fluctuation(a, b) + fluctuation(b, c) + 1e-12


def test_mean_fluctuation_identical_steps():
    trace = GenerationTrace(records=[
        make_record(s, [1, 2, 3], [1, 2, 3], t_global=10 - s) for s in range(3)
    ])
    assert mean_fluctuation(trace, 8) == 0.0


def test_mean_fluctuation_single_step_prefix():
    trace = GenerationTrace(records=[
        make_record(0, [1, 2, 3, 4], [1, 9, 3, 9], t_global=10),
        make_record(1, [1, 2, 3, 4], [1, 2, 3, 4], t_global=5),
    ])
    assert mean_fluctuation(trace, 10) == 0.5


def test_mean_fluctuation_hand_built():
    """Three steps with per-step fluctuation 0.5, 0.25, 1.0."""
    trace = GenerationTrace(records=[
        make_record(0, [1, 2, 3, 4], [1, 9, 3, 9], t_global=12),
        make_record(1, [1, 2, 3, 4], [1, 2, 3, 0], t_global=8),
        make_record(2, [1, 2, 3, 4], [0, 0, 0, 0], t_global=4),
    ])
    assert step_fluctuation(trace, 0) == 0.5
    assert mean_fluctuation(trace, 8) == pytest.approx((0.5 + 0.25) / 2)
    assert mean_fluctuation(trace, 4) == pytest.approx((0.5 + 0.25 + 1.0) / 3)
    assert trace_mean_fluctuation(trace) == pytest.approx((0.5 + 0.25 + 1.0) / 3)


def test_mean_fluctuation_out_of_range():
    trace = GenerationTrace(records=[make_record(0, [1], [1], t_global=5)])
    with pytest.raises(ContractError):
        mean_fluctuation(trace, 6)


def test_key_token_change_fractions():
    g = [9.0, 8.0, 7.0, 6.0, 5.0, 0.1, 0.1, 0.1]
    cur = make_record(0, [0] * 8, [1, 2, 3, 4, 5, 6, 7, 8], grad_norms=g)
    # next step flips key tokens 0..2, keeps 3..4
    nxt = make_record(1, [0] * 8,
                      [9, 9, 9, 4, 5, 6, 7, 8],
                      tokens_denoised=[9, 9, 9, 4, 5, 6, 7, 8])
    trace = GenerationTrace(records=[cur, nxt])
    assert key_token_change(trace, 0, k=5) == pytest.approx(0.6)
    nxt_same = make_record(1, [0] * 8, cur.tokens, tokens_denoised=cur.tokens)
    assert key_token_change(GenerationTrace(records=[cur, nxt_same]), 0, 5) == 0.0
    all_flip = make_record(1, [0] * 8, [9] * 8, tokens_denoised=[9] * 8)
    assert key_token_change(GenerationTrace(records=[cur, all_flip]), 0, 5) == 1.0


def test_key_token_change_last_step_zero():
    trace = GenerationTrace(records=[make_record(0, [1, 2], [1, 2])])
    assert key_token_change(trace, 0, k=2) == 0.0


def test_confidence_drop():
    trace = GenerationTrace(records=[
        make_record(0, [1], [1], conf_after=0.90, conf_before_next=0.78),
        make_record(1, [1], [1], conf_after=0.5, conf_before_next=0.5),
    ])
    assert confidence_drop(trace, 0) == pytest.approx(0.12)
    assert confidence_drop(trace, 1) == 0.0


def test_confidence_drop_missing_fields():
    trace = GenerationTrace(records=[make_record(0, [1], [1])])
    with pytest.raises(TraceSchemaError):
        confidence_drop(trace, 0)


def test_dist_n_closed_forms():
    assert dist_n([[1, 2, 3, 4, 5]]) == 1.0  # all trigrams distinct
    L = 9
    rep = [7, 7, 7, 7, 7, 7, 7, 7, 7]
    assert dist_n([rep]) == pytest.approx(1.0 / (L - 2))
    one = dist_n([[1, 2, 3, 4]])
    two = dist_n([[1, 2, 3, 4], [1, 2, 3, 4]])
    assert two == pytest.approx(one / 2)


def test_dist_n_hash_set_oracle():
    rng = np.random.default_rng(5)
    seqs = [rng.integers(0, 6, size=10).tolist() for _ in range(20)]
    grams = set()
    total = 0
    for s in seqs:
        for i in range(len(s) - 2):
            grams.add(tuple(s[i:i + 3]))
            total += 1
    assert dist_n(seqs, 3) == pytest.approx(len(grams) / total)
    assert dist_n(list(reversed(seqs)), 3) == dist_n(seqs, 3)


def test_dist_n_undefined():
    with pytest.raises(MetricsError):
        dist_n([[1, 2]], 3)


def test_binned_correlation_perfect_linear():
    x = np.linspace(0, 1, 40)
    assert binned_correlation(x, 2 * x + 1, bins=10) == pytest.approx(1.0, abs=1e-12)
    assert binned_correlation(x, -x, bins=10) == pytest.approx(-1.0, abs=1e-12)


def test_binned_correlation_self():
    rng = np.random.default_rng(8)
    x = rng.standard_normal(100)
    assert binned_correlation(x, x, bins=10) == pytest.approx(1.0, abs=1e-12)


def test_binned_correlation_permutation_null():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(1000)
    y = rng.permutation(rng.standard_normal(1000))
    assert abs(binned_correlation(x, y, bins=10)) < 0.35


def test_binned_correlation_errors():
    with pytest.raises(ContractError):
        binned_correlation([1, 2, 3], [1, 2, 3], bins=10)
    with pytest.raises(MetricsError):
        binned_correlation(np.ones(40), np.arange(40.0), bins=10)


def test_pinsker_examples():
    rep = pinsker_bound(0.0)
    assert rep.tv_lower == rep.kl_lower == rep.ce_bound_increment == 0.0
    rep = pinsker_bound(0.1)
    assert rep.kl_lower == pytest.approx(0.02)
    assert rep.tv_lower == pytest.approx(0.1)
    assert pinsker_bound(-0.3).tv_lower == pytest.approx(0.3)
    with pytest.raises(ContractError):
        pinsker_bound(1.5)


def _grid_distributions(m, step=0.05):
    """All distributions on m outcomes with entries on the step grid."""
    units = round(1.0 / step)
    out = []
    for cuts in itertools.combinations(range(units + m - 1), m - 1):
        parts = []
        prev = -1
        for c in cuts:
            parts.append(c - prev - 1)
            prev = c
        parts.append(units + m - 2 - prev)
        out.append(np.array(parts) / units)
    return out


def exact_kl(q, p):
    mask = q > 0
    if np.any(p[mask] == 0):
        return math.inf
    return float(np.sum(q[mask] * np.log(q[mask] / p[mask])))


def test_pinsker_bound_vs_exact_kl_small_supports():
    """KL(q||p) >= 2 dR^2 with dR = total variation, over all grid pairs on
    2 and 3 outcomes (brute force; the acceptance suite extends to 4)."""
    for m in (2, 3):
        dists = _grid_distributions(m, 0.05 if m == 2 else 0.1)
        for q in dists:
            for p in dists:
                tv = 0.5 * np.abs(q - p).sum()
                assert exact_kl(q, p) >= pinsker_bound(tv).kl_lower - 1e-12


# ---------------------------------------------------------------------------
# toy-run aggregation (session fixtures)


def test_confidence_drop_concentrates_on_key_token_flips(toy_arms):
    """Steps where most key tokens get overwritten lose more classifier
    confidence than the average step."""
    drops_all, drops_cond = [], []
    for row in toy_arms[("constant", 2000.0)][:120]:
        trace = row["trace"]
        for s in range(len(trace.records) - 1):
            d = confidence_drop(trace, s)
            drops_all.append(d)
            if key_token_change(trace, s, 5) >= 0.6:
                drops_cond.append(d)
    assert len(drops_cond) >= 30
    assert np.mean(drops_cond) >= np.mean(drops_all)


def test_trigram_overlap_distance():
    from tta.metrics import trigram_overlap_distance

    assert trigram_overlap_distance([1, 2, 3, 4], [1, 2, 3, 4]) == 0.0
    assert trigram_overlap_distance([1, 2, 3, 4], [5, 6, 7, 8]) == 1.0
    # [1,2,3,4,5] trigrams: {123,234,345}; [1,2,3,4,9]: {123,234,349}
    assert trigram_overlap_distance([1, 2, 3, 4, 5], [1, 2, 3, 4, 9]) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        trigram_overlap_distance([1, 2], [1, 2])


def test_step_fluctuation_pluggable_distance():
    from tta.metrics import step_fluctuation, trigram_overlap_distance

    trace = GenerationTrace(records=[
        make_record(0, [1, 2, 3, 4], [1, 2, 3, 9], t_global=5)])
    assert step_fluctuation(trace, 0) == pytest.approx(0.25)
    assert step_fluctuation(trace, 0, dist=trigram_overlap_distance) == pytest.approx(2 / 3)
