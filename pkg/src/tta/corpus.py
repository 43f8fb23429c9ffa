"""Deterministic synthetic attribute corpora.

Sequences follow a shared bigram backbone whose emissions are tilted toward
a per-label token band, so labels are easy to classify while every label
shares the same local structure (which keeps the trigram fluency judge
meaningful). The first few ids are reserved for specials and never emitted:
0 pad, 1 end-of-sequence (used by length-constrained generation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

N_RESERVED = 4
EOS_ID = 1


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 64
    seq_len: int = 16
    labels: tuple = ("neg", "pos")
    size: int = 10_000
    seed: int = 0
    tilt: float = 6.0
    band: int = 12

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ConfigError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if self.seq_len < 3:
            raise ConfigError(f"seq_len must be >= 3, got {self.seq_len}")
        if len(self.labels) < 2 or len(set(self.labels)) != len(self.labels):
            raise ConfigError("labels must be >= 2 distinct names")
        if self.tilt <= 1.0:
            raise ConfigError("tilt must exceed 1 for identifiable labels")
        object.__setattr__(self, "labels", tuple(self.labels))
        if N_RESERVED + len(self.labels) * self.band > self.vocab_size:
            raise ConfigError("label bands do not fit in the vocabulary")


@dataclass(frozen=True)
class LabeledExample:
    ids: tuple
    label: str


def label_band(spec: CorpusSpec, label: str) -> np.ndarray:
    """Token ids whose emission is tilted up for this label."""
    j = spec.labels.index(label)
    start = N_RESERVED + j * spec.band
    return np.arange(start, start + spec.band)


def transition_matrix(spec: CorpusSpec, label: str) -> np.ndarray:
    """Row-stochastic next-token matrix for one label: the shared backbone
    with the label band's columns re-weighted."""
    rng = np.random.default_rng(spec.seed)
    v = spec.vocab_size
    w = np.exp(0.7 * rng.standard_normal((v, v)))
    for off in (1, 2, 3):
        w[np.arange(v), (np.arange(v) + off) % v] *= 6.0
    w[:, :N_RESERVED] = 0.0
    tilt = np.ones(v)
    tilt[label_band(spec, label)] = spec.tilt
    w = w * tilt[None, :]
    return w / w.sum(axis=1, keepdims=True)


def stationary_distribution(spec: CorpusSpec, label: str, iters: int = 300) -> np.ndarray:
    """Stationary token distribution of the label's chain (power iteration)."""
    m = transition_matrix(spec, label)
    v = spec.vocab_size
    pi = np.zeros(v)
    pi[N_RESERVED:] = 1.0 / (v - N_RESERVED)
    for _ in range(iters):
        pi = pi @ m
    return pi / pi.sum()


def synthesize(spec: CorpusSpec) -> list[LabeledExample]:
    """Deterministic corpus: labels alternate, sequences are chain samples
    started from the label's stationary distribution."""
    rng = np.random.default_rng(spec.seed + 1)
    chains = {lab: transition_matrix(spec, lab) for lab in spec.labels}
    cum_rows = {lab: np.cumsum(m, axis=1) for lab, m in chains.items()}
    cum_init = {lab: np.cumsum(stationary_distribution(spec, lab)) for lab in spec.labels}
    out = []
    for k in range(spec.size):
        lab = spec.labels[k % len(spec.labels)]
        ids = np.empty(spec.seq_len, dtype=np.int64)
        u = rng.random(spec.seq_len)
        last = spec.vocab_size - 1
        ids[0] = min(np.searchsorted(cum_init[lab], u[0], side="right"), last)
        rows = cum_rows[lab]
        for j in range(1, spec.seq_len):
            ids[j] = min(np.searchsorted(rows[ids[j - 1]], u[j], side="right"), last)
        out.append(LabeledExample(ids=tuple(int(i) for i in ids), label=lab))
    return out


def split(corpus: list[LabeledExample], ratio: float, seed: int):
    """Label-stratified disjoint partition into (train, test)."""
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[LabeledExample]] = {}
    for ex in corpus:
        by_label.setdefault(ex.label, []).append(ex)
    train, test = [], []
    for lab in sorted(by_label):
        group = by_label[lab]
        order = rng.permutation(len(group))
        cut = round(ratio * len(group))
        train.extend(group[i] for i in order[:cut])
        test.extend(group[i] for i in order[cut:])
    return train, test


def examples_to_arrays(examples: list[LabeledExample], labels: tuple):
    """(M, N) id matrix plus integer label indices."""
    ids = np.array([ex.ids for ex in examples], dtype=np.int64)
    lab = np.array([labels.index(ex.label) for ex in examples], dtype=np.int64)
    return ids, lab


# ---------------------------------------------------------------------------
# persistence


def _spec_to_dict(spec: CorpusSpec) -> dict:
    return {
        "vocab_size": spec.vocab_size,
        "seq_len": spec.seq_len,
        "labels": list(spec.labels),
        "size": spec.size,
        "seed": spec.seed,
        "tilt": spec.tilt,
        "band": spec.band,
    }


def spec_from_dict(doc: dict) -> CorpusSpec:
    return CorpusSpec(
        vocab_size=int(doc["vocab_size"]),
        seq_len=int(doc["seq_len"]),
        labels=tuple(doc["labels"]),
        size=int(doc["size"]),
        seed=int(doc["seed"]),
        tilt=float(doc["tilt"]),
        band=int(doc["band"]),
    )


def save_corpus(path, spec: CorpusSpec, examples: list[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"corpus_spec": _spec_to_dict(spec)},
                            sort_keys=True, separators=(",", ":")) + "\n")
        for ex in examples:
            fh.write(json.dumps({"ids": list(ex.ids), "label": ex.label},
                                sort_keys=True, separators=(",", ":")) + "\n")


def load_corpus(path):
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if "corpus_spec" not in header:
            raise ConfigError(f"{path} missing corpus_spec header line")
        spec = spec_from_dict(header["corpus_spec"])
        examples = []
        for line in fh:
            doc = json.loads(line)
            examples.append(LabeledExample(ids=tuple(doc["ids"]), label=doc["label"]))
    return spec, examples


# ---------------------------------------------------------------------------
# naive Bayes oracle (also the held-out evaluation classifier)


@dataclass
class NaiveBayes:
    labels: tuple
    log_prior: np.ndarray
    log_lik: np.ndarray  # (L, V)

    def predict(self, ids) -> int:
        ids = np.asarray(ids, dtype=np.int64)
        scores = self.log_prior + self.log_lik[:, ids].sum(axis=1)
        return int(scores.argmax())

    def accuracy(self, examples: list[LabeledExample]) -> float:
        hits = sum(
            self.predict(ex.ids) == self.labels.index(ex.label) for ex in examples
        )
        return hits / len(examples)


def fit_naive_bayes(examples: list[LabeledExample], vocab_size: int,
                    labels: tuple, smoothing: float = 0.5) -> NaiveBayes:
    counts = np.zeros((len(labels), vocab_size))
    prior = np.zeros(len(labels))
    for ex in examples:
        j = labels.index(ex.label)
        prior[j] += 1
        np.add.at(counts[j], np.asarray(ex.ids, dtype=np.int64), 1.0)
    lik = (counts + smoothing) / (counts.sum(axis=1, keepdims=True) + smoothing * vocab_size)
    return NaiveBayes(labels=tuple(labels),
                      log_prior=np.log(prior / prior.sum()),
                      log_lik=np.log(lik))
