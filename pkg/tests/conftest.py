"""Shared fixtures. The expensive ones (trained toy models, the reduction
ladder, and the generation arms) are session scoped and built lazily, so
unit-test files that don't need them stay fast.
"""

import numpy as np
import pytest

from tta import corpus as corpus_mod
from tta.allocation import SchedulePolicy
from tta.diffusion import cosine_schedule
from tta.guidance import GuidanceConfig, generate
from tta.metrics import trace_mean_fluctuation, trace_mean_key_change
from tta.models import (
    ClassifierConfig,
    DenoiserConfig,
    ReduceHyper,
    TrainHyper,
    classifier_accuracy,
    fit_reference_lm,
    reduce_steps,
    reference_perplexity,
    train_classifier,
    train_denoiser,
)

TOY_SEED = 2024
TOY_TOP_P = 0.8
TOY_LAMBDA = 2000.0


@pytest.fixture(scope="session")
def toy_corpus():
    spec = corpus_mod.CorpusSpec(vocab_size=64, seq_len=16, labels=("neg", "pos"),
                                 size=10_000, seed=0, tilt=6.0, band=12)
    examples = corpus_mod.synthesize(spec)
    train, test = corpus_mod.split(examples, 0.8, TOY_SEED)
    ids_train, labels_train = corpus_mod.examples_to_arrays(train, spec.labels)
    ids_test, labels_test = corpus_mod.examples_to_arrays(test, spec.labels)
    return {
        "spec": spec,
        "examples": examples,
        "train": train,
        "test": test,
        "ids_train": ids_train,
        "labels_train": labels_train,
        "ids_test": ids_test,
        "labels_test": labels_test,
    }


@pytest.fixture(scope="session")
def toy_sched():
    return cosine_schedule(64, K=5.0)


@pytest.fixture(scope="session")
def toy_models(toy_corpus, toy_sched):
    """Teacher denoiser (T=64) + guidance classifier trained on the toy
    corpus, plus the trigram reference model and the naive-Bayes evaluation
    classifier."""
    spec = toy_corpus["spec"]
    den_cfg = DenoiserConfig(vocab_size=spec.vocab_size, seq_len=spec.seq_len,
                             d_model=48, heads=2, ff=96)
    clf_cfg = ClassifierConfig(vocab_size=spec.vocab_size, n_labels=len(spec.labels),
                               d_model=32, hidden=32)
    den, den_losses = train_denoiser(
        toy_corpus["ids_train"], toy_sched, den_cfg,
        TrainHyper(steps=15_000, batch=16, lr=3e-3),
        np.random.default_rng(TOY_SEED),
    )
    clf, _ = train_classifier(
        toy_corpus["ids_train"], toy_corpus["labels_train"], clf_cfg,
        TrainHyper(steps=1200, batch=16, lr=3e-3),
        np.random.default_rng(TOY_SEED + 1), K=toy_sched.K,
    )
    lm = fit_reference_lm(toy_corpus["ids_train"], spec.vocab_size)
    nb = corpus_mod.fit_naive_bayes(toy_corpus["train"], spec.vocab_size, spec.labels)
    clf_acc = classifier_accuracy(clf, clf_cfg, toy_corpus["ids_test"][:500],
                                  toy_corpus["labels_test"][:500], toy_sched.K)
    return {
        "den": den,
        "den_cfg": den_cfg,
        "den_losses": den_losses,
        "clf": clf,
        "clf_cfg": clf_cfg,
        "clf_acc": clf_acc,
        "lm": lm,
        "nb": nb,
    }


@pytest.fixture(scope="session")
def toy_students(toy_corpus, toy_sched, toy_models):
    """Progressive reduction ladder 64 -> 32 -> 16, each stage initialized
    from the previous one."""
    hyper = ReduceHyper(steps=1200, batch=4, lr=1e-3, top_p=TOY_TOP_P, prefix_hi=8)
    cfg = toy_models["den_cfg"]
    s32, sched32 = reduce_steps(toy_models["den"], 0.5, toy_corpus["ids_train"],
                                toy_sched, cfg, hyper, np.random.default_rng(99))
    s16, sched16 = reduce_steps(s32, 0.5, toy_corpus["ids_train"], sched32, cfg,
                                hyper, np.random.default_rng(100))
    return {"s32": s32, "sched32": sched32, "s16": s16, "sched16": sched16}


def _run_arm(models, sched, kind, lam, n, lm, nb, seed_base=70_000):
    rows = []
    pol = SchedulePolicy(kind, alpha_smooth=0.6)
    for i in range(n):
        target = i % 2
        rng = np.random.default_rng(seed_base + i)
        g = GuidanceConfig(strength=lam, target_label=target, iterations=2, window=1.0)
        tokens, trace = generate(models["den"], models["den_cfg"], sched, pol, 16,
                                 rng, clf_params=models["clf"], clf_cfg=models["clf_cfg"],
                                 guidance=g, top_p=TOY_TOP_P)
        rows.append({
            "tokens": tokens,
            "trace": trace,
            "acc": int(nb.predict(tokens) == target),
            "ppl": reference_perplexity(lm, tokens),
            "fluc": trace_mean_fluctuation(trace),
            "key": trace_mean_key_change(trace, 5),
        })
    return rows


@pytest.fixture(scope="session")
def toy_arms(toy_models, toy_sched):
    """Generation grid on the teacher at 16 strided steps: a guidance-
    strength ladder under the constant policy plus the adaptive arm, 200
    seeded samples each, paired by seed across arms."""
    lm, nb = toy_models["lm"], toy_models["nb"]
    arms = {}
    for kind, lam in (("constant", 0.0), ("constant", 200.0),
                      ("constant", TOY_LAMBDA), ("constant", 20_000.0),
                      ("adaptive", 0.0), ("adaptive", TOY_LAMBDA)):
        arms[(kind, lam)] = _run_arm(toy_models, toy_sched, kind, lam, 200, lm, nb)
    return arms
