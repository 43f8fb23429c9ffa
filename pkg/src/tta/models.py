"""Toy sequence models: the timestep-conditioned denoiser, the attribute
classifier used for guidance, and the trigram reference model that serves
as the local fluency judge. Training loops live here too, including the
progressive step-reduction fine-tune.

Parameters are flat name -> float64-array stores so checkpoints, Adam, and
the tape-leaf mapping stay trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tape, Tensor
from .diffusion import NoiseSchedule, SimplexState, cosine_schedule, encode_tokens, forward_noise, project_top_p, reverse_step
from .errors import ConfigError, ContractError, TrainingError


class ParamStore:
    """Ordered flat map of named float64 parameter arrays."""

    def __init__(self, arrays: dict | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        if arrays:
            for name, arr in arrays.items():
                self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, arr) -> None:
        self._arrays[name] = np.asarray(arr, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._arrays.values())

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a leaf on the given tape."""
        return {name: tape.leaf(arr) for name, arr in self._arrays.items()}


def leaf_grads(gmap: ad.GradientMap, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: gmap.of(t) for name, t in leaves.items()}


class Adam:
    """Adaptive moment estimation over a ParamStore."""

    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# denoiser


@dataclass
class DenoiserConfig:
    vocab_size: int
    seq_len: int
    d_model: int = 32
    heads: int = 2
    ff: int = 64
    blocks: int = 2
    use_position_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")


def init_denoiser(cfg: DenoiserConfig, rng) -> ParamStore:
    d, dk = cfg.d_model, cfg.d_model // cfg.heads
    p = ParamStore()
    p["embed"] = rng.standard_normal((cfg.vocab_size, d)) / math.sqrt(d)
    if cfg.use_position_embeddings:
        p["pos"] = rng.standard_normal((cfg.seq_len, d)) * 0.1
    for b in range(cfg.blocks):
        p[f"blk{b}.ln1.gain"] = np.ones(d)
        p[f"blk{b}.ln1.bias"] = np.zeros(d)
        for h in range(cfg.heads):
            p[f"blk{b}.head{h}.wq"] = rng.standard_normal((d, dk)) / math.sqrt(d)
            p[f"blk{b}.head{h}.wk"] = rng.standard_normal((d, dk)) / math.sqrt(d)
            p[f"blk{b}.head{h}.wv"] = rng.standard_normal((d, dk)) / math.sqrt(d)
            p[f"blk{b}.head{h}.wo"] = rng.standard_normal((dk, d)) / math.sqrt(dk) * 0.5
        p[f"blk{b}.ln2.gain"] = np.ones(d)
        p[f"blk{b}.ln2.bias"] = np.zeros(d)
        p[f"blk{b}.ff.w1"] = rng.standard_normal((d, cfg.ff)) / math.sqrt(d)
        p[f"blk{b}.ff.b1"] = np.zeros(cfg.ff)
        p[f"blk{b}.ff.w2"] = rng.standard_normal((cfg.ff, d)) / math.sqrt(cfg.ff) * 0.5
        p[f"blk{b}.ff.b2"] = np.zeros(d)
    p["out.ln.gain"] = np.ones(d)
    p["out.ln.bias"] = np.zeros(d)
    p["out.proj"] = rng.standard_normal((d, cfg.vocab_size)) / math.sqrt(d)
    p["out.bias"] = np.zeros(cfg.vocab_size)
    return p


def timestep_embedding(plan: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of each token's local timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(plan, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def _ln(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.scale_cols(ad.layer_norm(x), gain), bias)


def denoiser_logits(tape: Tape, leaves: dict[str, Tensor], cfg: DenoiserConfig,
                    state: SimplexState, plan) -> Tensor:
    """Clean-token logits for a noisy simplex state, on an existing tape.

    Conditioning is per token: each row gets the sinusoidal embedding of its
    own local timestep, which is what lets heterogeneous plans steer
    refinement strength row by row.
    """
    n = state.seq_len
    plan = np.asarray(plan, dtype=np.int64)
    if plan.shape != (n,):
        raise ContractError(f"plan length {plan.shape} does not match {n} rows")
    d, dk = cfg.d_model, cfg.d_model // cfg.heads

    probs = kernels.softmax_rows(state.logits)
    x = ad.matmul(tape.leaf(probs), leaves["embed"])
    if cfg.use_position_embeddings:
        x = ad.add(x, ad.gather_rows(leaves["pos"], np.arange(n)))
    x = ad.add(x, tape.leaf(timestep_embedding(plan, d)))

    scale = 1.0 / math.sqrt(dk)
    for b in range(cfg.blocks):
        a = _ln(x, leaves[f"blk{b}.ln1.gain"], leaves[f"blk{b}.ln1.bias"])
        mixed = None
        for h in range(cfg.heads):
            q = ad.matmul(a, leaves[f"blk{b}.head{h}.wq"])
            k = ad.matmul(a, leaves[f"blk{b}.head{h}.wk"])
            v = ad.matmul(a, leaves[f"blk{b}.head{h}.wv"])
            att = ad.softmax(ad.scalar_scale(ad.matmul(q, ad.transpose(k)), scale))
            contrib = ad.matmul(ad.matmul(att, v), leaves[f"blk{b}.head{h}.wo"])
            mixed = contrib if mixed is None else ad.add(mixed, contrib)
        x = ad.add(x, mixed)
        a2 = _ln(x, leaves[f"blk{b}.ln2.gain"], leaves[f"blk{b}.ln2.bias"])
        f = ad.relu(ad.add(ad.matmul(a2, leaves[f"blk{b}.ff.w1"]), leaves[f"blk{b}.ff.b1"]))
        f = ad.add(ad.matmul(f, leaves[f"blk{b}.ff.w2"]), leaves[f"blk{b}.ff.b2"])
        x = ad.add(x, f)

    out = _ln(x, leaves["out.ln.gain"], leaves["out.ln.bias"])
    return ad.add(ad.matmul(out, leaves["out.proj"]), leaves["out.bias"])


def denoise(params: ParamStore, cfg: DenoiserConfig, state: SimplexState, plan) -> np.ndarray:
    """Inference-only forward pass; returns the N x V logit array."""
    tape = Tape()
    return denoiser_logits(tape, params.leaves(tape), cfg, state, plan).data


# ---------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierConfig:
    vocab_size: int
    n_labels: int
    d_model: int = 32
    hidden: int = 32
    tau: float = 1.0

    def __post_init__(self):
        if self.n_labels < 2:
            raise ConfigError("classifier needs at least 2 labels")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


def init_classifier(cfg: ClassifierConfig, rng) -> ParamStore:
    d = cfg.d_model
    p = ParamStore()
    p["cls.win"] = rng.standard_normal((cfg.vocab_size, d)) / math.sqrt(cfg.vocab_size)
    p["cls.bin"] = np.zeros(d)
    p["cls.w1"] = rng.standard_normal((d, cfg.hidden)) / math.sqrt(d)
    p["cls.b1"] = np.zeros(cfg.hidden)
    p["cls.w2"] = rng.standard_normal((cfg.hidden, cfg.n_labels)) / math.sqrt(cfg.hidden)
    p["cls.b2"] = np.zeros(cfg.n_labels)
    return p


def classifier_logits(tape: Tape, leaves: dict[str, Tensor], cfg: ClassifierConfig,
                      x: Tensor) -> Tensor:
    """Label logits (1 x L) from a simplex-state tensor so gradients can
    flow back to the state. Rows are read through softmax(row / tau)."""
    z = ad.softmax(ad.scalar_scale(x, 1.0 / cfg.tau))
    h = ad.add(ad.matmul(z, leaves["cls.win"]), leaves["cls.bin"])
    pooled = ad.mean_rows(h)
    hid = ad.relu(ad.add(ad.matmul(pooled, leaves["cls.w1"]), leaves["cls.b1"]))
    return ad.add(ad.matmul(hid, leaves["cls.w2"]), leaves["cls.b2"])


def classify(params: ParamStore, cfg: ClassifierConfig, state: SimplexState) -> np.ndarray:
    """Probability vector over labels for one state."""
    tape = Tape()
    logits = classifier_logits(tape, params.leaves(tape), cfg, tape.leaf(state.logits))
    return kernels.softmax_rows(logits.data)[0]


def state_label_gradient(params: ParamStore, cfg: ClassifierConfig,
                         state_logits: np.ndarray, target: int) -> tuple[np.ndarray, float]:
    """Gradient of log P(target | state) w.r.t. the raw simplex logits,
    plus P(target) itself."""
    tape = Tape()
    x = tape.leaf(state_logits)
    logits = classifier_logits(tape, params.leaves(tape), cfg, x)
    loss = ad.cross_entropy(logits, np.array([target]))
    grads = ad.backward(loss)
    prob = float(kernels.softmax_rows(logits.data)[0, target])
    return -grads.of(x), prob


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    steps: int
    batch: int = 16
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _mean_loss(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scalar_scale(total, 1.0 / len(terms))


def train_denoiser(train_ids: np.ndarray, sched: NoiseSchedule, cfg: DenoiserConfig,
                   hyper: TrainHyper, rng, init: ParamStore | None = None) -> tuple[ParamStore, list[float]]:
    """Standard denoising training: one shared timestep per batch, noise the
    clean encodings to it, and minimize token cross-entropy of the denoiser
    output against the clean ids."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    if train_ids.ndim != 2 or train_ids.shape[0] == 0:
        raise ContractError("training corpus must be a non-empty (M, N) id array")
    params = init.copy() if init is not None else init_denoiser(cfg, rng)
    opt = Adam(params, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    losses: list[float] = []
    m = train_ids.shape[0]
    for step in range(hyper.steps):
        idx = rng.integers(0, m, size=hyper.batch)
        t = int(rng.integers(1, sched.T + 1))
        plan = np.full(cfg.seq_len, t, dtype=np.int64)
        tape = Tape()
        leaves = params.leaves(tape)
        terms = []
        for i in idx:
            x0 = encode_tokens(train_ids[i], cfg.vocab_size, sched.K)
            xt = forward_noise(x0, plan, sched, rng)
            logits = denoiser_logits(tape, leaves, cfg, xt, plan)
            terms.append(ad.cross_entropy(logits, train_ids[i]))
        loss = _mean_loss(terms)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"denoiser loss diverged at step {step}",
                                {"step": step, "recent": losses[-20:]})
        losses.append(value)
        opt.step(params, leaf_grads(ad.backward(loss), leaves))
    return params, losses


def train_classifier(train_ids: np.ndarray, train_labels: np.ndarray,
                     cfg: ClassifierConfig, hyper: TrainHyper, rng,
                     K: float, init: ParamStore | None = None) -> tuple[ParamStore, list[float]]:
    """Fit the guidance classifier on clean +K/-K encodings."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if train_ids.shape[0] != train_labels.shape[0] or train_ids.shape[0] == 0:
        raise ContractError("ids/labels must be non-empty and aligned")
    params = init.copy() if init is not None else init_classifier(cfg, rng)
    opt = Adam(params, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    losses: list[float] = []
    m = train_ids.shape[0]
    for step in range(hyper.steps):
        idx = rng.integers(0, m, size=hyper.batch)
        tape = Tape()
        leaves = params.leaves(tape)
        terms = []
        for i in idx:
            x0 = encode_tokens(train_ids[i], cfg.vocab_size, K)
            logits = classifier_logits(tape, leaves, cfg, tape.leaf(x0.logits))
            terms.append(ad.cross_entropy(logits, train_labels[i : i + 1]))
        loss = _mean_loss(terms)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"classifier loss diverged at step {step}",
                                {"step": step, "recent": losses[-20:]})
        losses.append(value)
        opt.step(params, leaf_grads(ad.backward(loss), leaves))
    return params, losses


def classifier_accuracy(params: ParamStore, cfg: ClassifierConfig, ids: np.ndarray,
                        labels: np.ndarray, K: float) -> float:
    hits = 0
    for row, lab in zip(np.asarray(ids, dtype=np.int64), labels):
        probs = classify(params, cfg, encode_tokens(row, cfg.vocab_size, K))
        hits += int(probs.argmax() == lab)
    return hits / len(labels)


# ---------------------------------------------------------------------------
# progressive step reduction


@dataclass
class ReduceHyper:
    steps: int
    batch: int = 4
    lr: float = 1e-3
    rollout_timesteps: int = 4
    top_p: float = 0.9
    prefix_lo: int = 2
    prefix_hi: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _rollout_states(params: ParamStore, cfg: DenoiserConfig, sched: NoiseSchedule,
                    prefix: np.ndarray, rng, top_p: float) -> list[tuple[SimplexState, np.ndarray]]:
    """Unguided reverse rollout with the prefix clamped; returns the noisy
    input state and plan seen by the denoiser at every step."""
    n = cfg.seq_len
    steps = sched.T
    x = SimplexState(rng.standard_normal((n, cfg.vocab_size)) * sched.K)
    seen: list[tuple[SimplexState, np.ndarray]] = []
    plan = np.full(n, sched.T, dtype=np.int64)
    for s in range(steps, 0, -1):
        seen.append((x.copy(), plan.copy()))
        logits = denoise(params, cfg, x, plan)
        x_hat = project_top_p(logits, top_p, sched.K, rng)
        if s < steps:
            frozen = plan == 0
            x_hat.logits[frozen] = x.logits[frozen]
        if prefix.size:
            x_hat.logits[: prefix.size] = encode_tokens(
                prefix, cfg.vocab_size, sched.K
            ).logits
        next_plan = np.full(n, s - 1, dtype=np.int64)
        next_plan[: prefix.size] = 0
        if s > 1:
            x = reverse_step(x_hat, next_plan, sched, rng)
            plan = next_plan
        else:
            x = x_hat
    return seen


def reduce_steps(teacher: ParamStore, r: float, train_ids: np.ndarray,
                 teacher_sched: NoiseSchedule, cfg: DenoiserConfig,
                 hyper: ReduceHyper, rng) -> tuple[ParamStore, NoiseSchedule]:
    """Fine-tune a step-reduced student initialized from the teacher.

    The student runs its own reverse rollout (prefix-conditioned, no
    guidance) and is trained with token cross-entropy of its denoiser
    logits against the ground-truth sequence at a random subset of rollout
    steps; there is no distillation target.
    """
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"reduction ratio must lie in (0, 1], got {r}")
    student_T = max(1, math.ceil(r * teacher_sched.T))
    sched = cosine_schedule(student_T, K=teacher_sched.K, s=teacher_sched.s)
    params = teacher.copy()
    if hyper.steps == 0:
        return params, sched
    train_ids = np.asarray(train_ids, dtype=np.int64)
    opt = Adam(params, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    m = train_ids.shape[0]
    for step in range(hyper.steps):
        idx = rng.integers(0, m, size=hyper.batch)
        tape = Tape()
        leaves = params.leaves(tape)
        terms = []
        for i in idx:
            ids = train_ids[i]
            p_len = int(rng.integers(hyper.prefix_lo, hyper.prefix_hi + 1))
            seen = _rollout_states(params, cfg, sched, ids[:p_len], rng, hyper.top_p)
            take = min(hyper.rollout_timesteps, len(seen))
            picks = rng.permutation(len(seen))[:take]
            for j in picks:
                state, plan = seen[j]
                logits = denoiser_logits(tape, leaves, cfg, state, plan)
                terms.append(ad.cross_entropy(logits, ids))
        loss = _mean_loss(terms)
        if not math.isfinite(float(loss.data)):
            raise TrainingError(f"step-reduction loss diverged at step {step}", {"step": step})
        opt.step(params, leaf_grads(ad.backward(loss), leaves))
    return params, sched


def rollout_cross_entropy(params: ParamStore, cfg: DenoiserConfig, sched: NoiseSchedule,
                          ids_batch: np.ndarray, inference_steps: int, prefix_len: int,
                          rng, top_p: float = 0.9) -> float:
    """Held-out sequence cross-entropy of the final denoiser logits after an
    `inference_steps` rollout, averaged per non-prefix token."""
    if not 1 <= inference_steps <= sched.T:
        raise ContractError(f"inference steps must lie in [1, {sched.T}]")
    ids_batch = np.asarray(ids_batch, dtype=np.int64)
    n = cfg.seq_len
    total, count = 0.0, 0
    for ids in ids_batch:
        prefix = ids[:prefix_len]
        x = SimplexState(rng.standard_normal((n, cfg.vocab_size)) * sched.K)
        plan = np.full(n, sched.T, dtype=np.int64)
        final_logits = None
        for s in range(inference_steps, 0, -1):
            logits = denoise(params, cfg, x, plan)
            final_logits = logits
            x_hat = project_top_p(logits, top_p, sched.K, rng)
            if s < inference_steps:
                frozen = plan == 0
                x_hat.logits[frozen] = x.logits[frozen]
            if prefix.size:
                x_hat.logits[: prefix.size] = encode_tokens(prefix, cfg.vocab_size, sched.K).logits
            t_next = int(round(sched.T * (s - 1) / inference_steps))
            next_plan = np.full(n, t_next, dtype=np.int64)
            next_plan[: prefix.size] = 0
            if s > 1:
                x = reverse_step(x_hat, next_plan, sched, rng)
                plan = next_plan
        logp = kernels.log_softmax_rows(final_logits)
        rows = np.arange(prefix_len, n)
        total += -logp[rows, ids[prefix_len:]].sum()
        count += rows.size
    return total / count


# ---------------------------------------------------------------------------
# trigram reference model


@dataclass
class ReferenceLM:
    """Interpolated trigram model with add-k smoothing; the BOS symbol is
    index vocab_size in the context axes."""

    vocab_size: int
    bos: int
    log_probs: np.ndarray
    lambdas: tuple = (0.6, 0.3, 0.1)
    add_k: float = 0.01


def fit_reference_lm(train_ids: np.ndarray, vocab_size: int,
                     lambdas=(0.6, 0.3, 0.1), add_k: float = 0.01) -> ReferenceLM:
    train_ids = np.asarray(train_ids, dtype=np.int64)
    if abs(sum(lambdas) - 1.0) > 1e-12:
        raise ConfigError("interpolation weights must sum to 1")
    v, bos = vocab_size, vocab_size
    c3 = np.zeros((v + 1, v + 1, v))
    c2 = np.zeros((v + 1, v))
    c1 = np.zeros(v)
    for seq in train_ids:
        a = np.concatenate(([bos, bos], seq[:-2]))
        b = np.concatenate(([bos], seq[:-1]))
        np.add.at(c3, (a, b, seq), 1.0)
        np.add.at(c2, (b, seq), 1.0)
        np.add.at(c1, seq, 1.0)
    p3 = (c3 + add_k) / (c3.sum(axis=2, keepdims=True) + add_k * v)
    p2 = (c2 + add_k) / (c2.sum(axis=1, keepdims=True) + add_k * v)
    p1 = (c1 + add_k) / (c1.sum() + add_k * v)
    probs = lambdas[0] * p3 + lambdas[1] * p2[None, :, :] + lambdas[2] * p1[None, None, :]
    return ReferenceLM(vocab_size=v, bos=bos, log_probs=np.log(probs),
                       lambdas=tuple(lambdas), add_k=add_k)


def reference_perplexity(lm: ReferenceLM, ids) -> float:
    """exp(mean negative log trigram probability) of one sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ContractError("perplexity of an empty sequence is undefined")
    nll = kernels.trigram_nll(ids, lm.log_probs, lm.bos)
    return math.exp(nll / ids.size)


def corpus_mean_perplexity(lm: ReferenceLM, ids_batch: np.ndarray) -> float:
    ids_batch = np.asarray(ids_batch, dtype=np.int64)
    return float(np.mean([reference_perplexity(lm, row) for row in ids_batch]))
