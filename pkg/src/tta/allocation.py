"""Token timestep allocation policies and the supporting math.

A policy maps the global timestep t and the sequence length to a per-token
plan of local timesteps. The adaptive policy consumes normalized classifier
gradient magnitudes so strongly-pushed tokens receive smaller timesteps and
keep their guided edits. Also houses the budgeted noise-allocation solver
(linear objective over a box/budget intersection, solved at a vertex) and
the mapping from the simplex schedule to the induced uniform-state discrete
schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError

POLICY_KINDS = (
    "constant",
    "linear",
    "backward_linear",
    "random",
    "fixed_zero",
    "fixed_T",
    "adaptive",
)


@dataclass
class SchedulePolicy:
    kind: str
    alpha_smooth: float = 0.6
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.alpha_smooth <= 1.0:
            raise ConfigError(f"alpha_smooth must lie in [0, 1], got {self.alpha_smooth}")


@dataclass
class ImportanceScores:
    """Per-token gradient magnitudes g and their min-max normalization.

    When all magnitudes coincide the normalized scores are defined as 0.5,
    collapsing the adaptive plan toward a mid-strength constant plan.
    """

    g: np.ndarray
    g_hat: np.ndarray

    @classmethod
    def from_norms(cls, g) -> "ImportanceScores":
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 1 or (g.size and g.min() < 0):
            raise ContractError("importance magnitudes must be 1-D and non-negative")
        lo, hi = g.min(), g.max()
        if hi > lo:
            g_hat = (g - lo) / (hi - lo)
        else:
            g_hat = np.full_like(g, 0.5)
        return cls(g=g, g_hat=g_hat)

    def top_k(self, k: int) -> np.ndarray:
        """Indices of the k largest magnitudes; ties favor lower indices."""
        if k < 0 or k > self.g.size:
            raise ContractError(f"k must lie in [0, {self.g.size}]")
        return np.argsort(-self.g, kind="stable")[:k]


def importance_from_gradients(grad) -> ImportanceScores:
    """Euclidean norm per row of an N x V gradient, min-max normalized."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 2:
        raise ContractError("gradient matrix must be 2-D")
    if not np.all(np.isfinite(grad)):
        raise ContractError("gradient matrix must be finite")
    return ImportanceScores.from_norms(np.sqrt((grad * grad).sum(axis=1)))


def allocate(
    policy: SchedulePolicy,
    t: int,
    n: int,
    scores: ImportanceScores | None = None,
    rng=None,
    t_max: int | None = None,
) -> np.ndarray:
    """Build a per-token timestep plan for global timestep t.

    t_max is the schedule ceiling used for clamping and by the fixed_T
    policy; it defaults to t. The random policy draws iid integers from the
    open interval (0, t) and therefore needs an explicit rng.
    """
    if t < 0:
        raise ContractError(f"global timestep must be >= 0, got {t}")
    if n < 1:
        raise ContractError(f"sequence length must be >= 1, got {n}")
    if t_max is None:
        t_max = t
    if t > t_max:
        raise ContractError(f"t={t} exceeds t_max={t_max}")

    kind = policy.kind
    if kind == "constant":
        plan = np.full(n, t, dtype=np.int64)
    elif kind == "linear":
        if n == 1:
            plan = np.array([t], dtype=np.int64)
        else:
            plan = (np.arange(n, dtype=np.int64) * t) // (n - 1)
    elif kind == "backward_linear":
        if n == 1:
            plan = np.array([t], dtype=np.int64)
        else:
            plan = ((n - 1 - np.arange(n, dtype=np.int64)) * t) // (n - 1)
    elif kind == "random":
        if rng is None:
            raise ContractError("random policy requires an rng stream")
        if t < 2:
            plan = np.zeros(n, dtype=np.int64)
        else:
            plan = rng.integers(1, t, size=n, dtype=np.int64)
    elif kind == "fixed_zero":
        plan = np.zeros(n, dtype=np.int64)
    elif kind == "fixed_T":
        plan = np.full(n, t_max, dtype=np.int64)
    elif kind == "adaptive":
        if scores is None:
            raise ContractError("adaptive policy requires importance scores")
        if scores.g_hat.shape != (n,):
            raise ContractError(
                f"scores length {scores.g_hat.shape} does not match n={n}"
            )
        a = policy.alpha_smooth
        vals = a * t + (1.0 - a) * (1.0 - scores.g_hat) * t
        # round half up for determinism (numpy rounds half to even)
        plan = np.floor(vals + 0.5).astype(np.int64)
    else:  # pragma: no cover - guarded by SchedulePolicy validation
        raise ConfigError(f"unknown policy kind {kind!r}")
    return np.clip(plan, 0, t_max)


@dataclass
class AllocationProblem:
    """Minimize sum(b_i * sigma2_i) subject to sum(sigma2) == budget and
    box `lo <= sigma2_i <= hi."""

    b: np.ndarray
    budget: float
    lo: float
    hi: float

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.b.ndim != 1 or self.b.size == 0:
            raise ConfigError("weights must be a non-empty 1-D array")
        if self.b.min() < 0:
            raise ConfigError("weights must be non-negative")
        if not 0 <= self.lo <= self.hi:
            raise ConfigError(f"invalid box [{self.lo}, {self.hi}]")
        n = self.b.size
        if not (n * self.lo <= self.budget <= n * self.hi):
            raise ConfigError(
                f"budget {self.budget} infeasible for box [{self.lo}, {self.hi}] x {n}"
            )


def solve_budgeted_allocation(p: AllocationProblem) -> np.ndarray:
    """Exact vertex optimum of the linear program.

    Greedy fractional-knapsack: walk tokens by ascending weight (ties by
    index) handing each the largest variance the residual budget allows, so
    small-weight tokens absorb the noise budget and large-weight tokens sit
    at the floor.
    """
    n = p.b.size
    sigma2 = np.full(n, p.lo)
    residual = p.budget - n * p.lo
    full = p.hi - p.lo
    for i in np.argsort(p.b, kind="stable"):
        if residual <= 0:
            break
        take = min(full, residual)
        # assign the bound itself on a full raise so the box holds exactly
        sigma2[i] = p.hi if take == full else p.lo + take
        residual -= take
    return sigma2


def duality_schedule(
    alpha_bar: float,
    vocab_size: int,
    rng=None,
    n_draws: int = 100_000,
) -> tuple[float, float]:
    """Map a simplex-schedule coefficient to the induced discrete schedule.

    Returns (alpha_tilde, alpha_disc) where alpha_tilde^2 = 4a/(1+3a) and
    alpha_disc is recovered from the argmax pushforward: draw
    w ~ Normal(alpha_tilde * e_y, (1 - alpha_tilde^2) I), estimate
    P(argmax w = y) by Monte Carlo, and invert the categorical marginal
    P = alpha_disc + (1 - alpha_disc)/V. Both endpoints are exact without
    sampling. The mapping takes no embedding-scale argument: it is
    independent of K by construction.
    """
    if vocab_size < 2:
        raise ContractError(f"vocab size must be >= 2, got {vocab_size}")
    if not 0.0 <= alpha_bar <= 1.0:
        raise ContractError(f"alpha_bar must lie in [0, 1], got {alpha_bar}")
    if n_draws < 1:
        raise ConfigError(f"n_draws must be >= 1, got {n_draws}")

    alpha_tilde = math.sqrt(4.0 * alpha_bar / (1.0 + 3.0 * alpha_bar)) if alpha_bar else 0.0
    if alpha_tilde >= 1.0:
        return 1.0, 1.0
    if alpha_tilde == 0.0:
        return 0.0, 0.0

    if rng is None:
        rng = np.random.default_rng(0)
    sigma = math.sqrt(1.0 - alpha_tilde**2)
    hits = 0
    remaining = n_draws
    chunk = 65_536
    while remaining > 0:
        m = min(chunk, remaining)
        w = rng.standard_normal((m, vocab_size)) * sigma
        w[:, 0] += alpha_tilde
        hits += kernels.argmax_hits(w, 0)
        remaining -= m
    p_hit = hits / n_draws
    base = 1.0 / vocab_size
    return alpha_tilde, (p_hit - base) / (1.0 - base)
