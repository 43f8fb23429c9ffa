"""Noise schedules, simplex token states, and per-token diffusion steps.

Tokens live in vocabulary space as rows of +K/-K logits. Forward noising
and the reverse re-noise step are generalized so every row carries its own
local timestep; a local timestep of zero is an exact pass-through, which is
what keeps frozen tokens bit-stable across steps.

All stochastic ops take an explicit numpy Generator. Row noise is drawn
from per-row child streams (``rng.spawn``) so each row's randomness is
independent of every other row's plan entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError


@dataclass
class NoiseSchedule:
    """Precomputed signal coefficients for a T-step diffusion process.

    alpha_bar has length T+1 with alpha_bar[0] == 1; alpha has the same
    length with alpha[0] == 1 as the no-op step, alpha[t] = abar_t/abar_{t-1}
    for t >= 1.
    """

    T: int
    s: float
    K: float
    alpha_bar: np.ndarray
    alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"schedule T must be >= 1, got {self.T}")
        if self.K <= 0:
            raise ConfigError(f"simplex constant K must be > 0, got {self.K}")
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ConfigError(f"alpha_bar must have length T+1, got {ab.shape}")
        if ab[0] != 1.0:
            raise ConfigError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if ab[self.T] >= 0.01:
            raise ConfigError(f"alpha_bar[T] must be < 0.01, got {ab[self.T]}")
        al = np.empty(self.T + 1)
        al[0] = 1.0
        al[1:] = ab[1:] / ab[:-1]
        if not np.all((al[1:] > 0) & (al[1:] <= 1)):
            raise ConfigError("alpha values must lie in (0, 1]")
        # injected-noise variance (1 - alpha_t) must grow with t
        if not np.all(np.diff(al[1:]) < 0):
            raise ConfigError("alpha must be strictly decreasing over 1..T")
        self.alpha_bar = ab
        self.alpha = al

    def to_json(self) -> str:
        doc = {"T": self.T, "s": self.s, "K": self.K,
               "alpha_bar": self.alpha_bar.tolist()}
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        doc = json.loads(text)
        return cls(T=int(doc["T"]), s=float(doc["s"]), K=float(doc["K"]),
                   alpha_bar=np.asarray(doc["alpha_bar"], dtype=np.float64))


def cosine_schedule(T: int, K: float, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine cumulative schedule with offset s, normalized so
    alpha_bar[0] is exactly 1."""
    if T < 1:
        raise ConfigError(f"schedule T must be >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (math.pi / 2.0)) ** 2
    return NoiseSchedule(T=T, s=s, K=K, alpha_bar=f / f[0])


@dataclass
class SimplexState:
    """N x V matrix of per-token vocabulary logits."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ContractError(f"simplex state must be 2-D, got {self.logits.shape}")

    @property
    def seq_len(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]

    def copy(self) -> "SimplexState":
        return SimplexState(self.logits.copy())


def encode_tokens(ids, vocab_size: int, K: float) -> SimplexState:
    """Map token ids to +K/-K rows (+K at the token's column)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ContractError("token ids must be 1-D")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id out of range [0, {vocab_size})")
    logits = np.full((ids.size, vocab_size), -float(K))
    logits[np.arange(ids.size), ids] = float(K)
    return SimplexState(logits)


def decode(state: SimplexState) -> np.ndarray:
    """Per-row argmax column; ties break to the lowest index."""
    return state.logits.argmax(axis=1)


def _plan_array(plan, n: int, T: int) -> np.ndarray:
    arr = np.asarray(plan, dtype=np.int64)
    if arr.shape != (n,):
        raise ContractError(f"plan length {arr.shape} does not match {n} rows")
    if arr.size and (arr.min() < 0 or arr.max() > T):
        raise ContractError(f"plan entries must lie in [0, {T}]")
    return arr


def _renoise(state: SimplexState, plan, sched: NoiseSchedule, rng) -> SimplexState:
    n, v = state.logits.shape
    t = _plan_array(plan, n, sched.T)
    abar = sched.alpha_bar[t]
    coef_signal = np.sqrt(abar)
    coef_noise = np.sqrt(1.0 - abar) * sched.K
    z = np.zeros((n, v))
    children = rng.spawn(n)
    for i in range(n):
        if t[i] > 0:
            z[i] = children[i].standard_normal(v)
    return SimplexState(kernels.mix_rows(state.logits, z, coef_signal, coef_noise))


def forward_noise(x0: SimplexState, plan, sched: NoiseSchedule, rng) -> SimplexState:
    """Noise row i to its local timestep: sqrt(abar_t)*x0 + sqrt(1-abar_t)*z
    with z ~ Normal(0, K^2 I). Rows with t == 0 are returned bit-exactly."""
    return _renoise(x0, plan, sched, rng)


def reverse_step(x_hat: SimplexState, next_plan, sched: NoiseSchedule, rng) -> SimplexState:
    """Re-noise a projected (token-valued) state to each row's next local
    timestep. Rows whose next entry is 0 pass through unchanged."""
    return _renoise(x_hat, next_plan, sched, rng)


def project_top_p(logits, p: float, K: float, rng) -> SimplexState:
    """Sample one token per row from the top-p nucleus of softmax(row) and
    emit the +K/-K encoding of the samples.

    Consumes exactly one uniform per row regardless of nucleus size, so the
    caller's random stream does not depend on the logits.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"top-p must lie in (0, 1], got {p}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ContractError("top-p projection requires finite logits")
    probs = kernels.softmax_rows(logits)
    u = rng.random(logits.shape[0])
    ids = kernels.topp_sample_rows(probs, p, u)
    return encode_tokens(ids, logits.shape[1], K)
