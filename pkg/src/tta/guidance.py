"""Classifier-guided reverse sampling with per-token timestep plans.

One generation is one single-threaded task owning its rng stream; model
parameters are read-only throughout. Every step is recorded in a trace rich
enough to drive all the diagnostics: decoded tokens before the step, after
plain denoising, and after guidance/clamping, plus per-token gradient
norms, the key-token set, and classifier confidences.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .allocation import ImportanceScores, SchedulePolicy, allocate, importance_from_gradients
from .diffusion import NoiseSchedule, SimplexState, decode, encode_tokens, project_top_p, reverse_step
from .errors import ConfigError, ContractError, GuidanceError, TraceSchemaError
from .models import ClassifierConfig, DenoiserConfig, ParamStore, classify, denoise, state_label_gradient

TRACE_SCHEMA_VERSION = 1


@dataclass
class GuidanceConfig:
    strength: float  # lambda in the guided update
    target_label: int
    iterations: int = 2
    window: float = 1.0

    def __post_init__(self):
        if self.strength < 0:
            raise ConfigError(f"guidance strength must be >= 0, got {self.strength}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not 0.0 <= self.window <= 1.0:
            raise ConfigError(f"guidance window must lie in [0, 1], got {self.window}")


@dataclass
class LexicalConstraint:
    kind: str
    eos_position: int
    eos_token: int

    def __post_init__(self):
        if self.kind != "length":
            raise ConfigError(f"unsupported constraint kind {self.kind!r}")


@dataclass
class StepRecord:
    step: int
    t_global: int
    plan: np.ndarray
    tokens: np.ndarray
    tokens_in: np.ndarray
    tokens_denoised: np.ndarray
    grad_norms: np.ndarray
    key_tokens: np.ndarray
    conf_after_guidance: float | None
    conf_before_next: float | None
    conf_after_raw: float | None
    seed_digest: str


@dataclass
class GenerationTrace:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"trace_meta": self.meta}, sort_keys=True,
                            separators=(",", ":"))]
        for r in self.records:
            doc = {
                "step": r.step,
                "t_global": r.t_global,
                "plan": r.plan.tolist(),
                "tokens": r.tokens.tolist(),
                "tokens_in": r.tokens_in.tolist(),
                "tokens_denoised": r.tokens_denoised.tolist(),
                "grad_norms": [float(x) for x in r.grad_norms],
                "key_tokens": r.key_tokens.tolist(),
                "conf_after_guidance": r.conf_after_guidance,
                "conf_before_next": r.conf_before_next,
                "conf_after_raw": r.conf_after_raw,
                "seed_digest": r.seed_digest,
            }
            lines.append(json.dumps(doc, sort_keys=False, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "GenerationTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise TraceSchemaError("empty trace")
        head = json.loads(lines[0])
        if "trace_meta" not in head:
            raise TraceSchemaError("trace missing meta header line")
        trace = cls(meta=head["trace_meta"])
        for k, line in enumerate(lines[1:]):
            doc = json.loads(line)
            try:
                trace.records.append(StepRecord(
                    step=int(doc["step"]),
                    t_global=int(doc["t_global"]),
                    plan=np.asarray(doc["plan"], dtype=np.int64),
                    tokens=np.asarray(doc["tokens"], dtype=np.int64),
                    tokens_in=np.asarray(doc["tokens_in"], dtype=np.int64),
                    tokens_denoised=np.asarray(doc["tokens_denoised"], dtype=np.int64),
                    grad_norms=np.asarray(doc["grad_norms"], dtype=np.float64),
                    key_tokens=np.asarray(doc["key_tokens"], dtype=np.int64),
                    conf_after_guidance=doc["conf_after_guidance"],
                    conf_before_next=doc["conf_before_next"],
                    conf_after_raw=doc["conf_after_raw"],
                    seed_digest=doc["seed_digest"],
                ))
            except KeyError as exc:
                raise TraceSchemaError(f"trace record {k} missing field {exc}") from exc
        return trace


def validate_trace(trace: GenerationTrace) -> None:
    """Schema check: every metrics input present, arrays consistent."""
    if "seq_len" not in trace.meta or "steps" not in trace.meta:
        raise TraceSchemaError("trace meta missing seq_len/steps")
    n = trace.meta["seq_len"]
    if len(trace.records) != trace.meta["steps"]:
        raise TraceSchemaError(
            f"trace has {len(trace.records)} records, expected {trace.meta['steps']}"
        )
    for k, r in enumerate(trace.records):
        for name in ("plan", "tokens", "tokens_in", "tokens_denoised", "grad_norms"):
            if getattr(r, name).shape != (n,):
                raise TraceSchemaError(f"record {k}: field {name} has wrong length")
        if r.seed_digest is None or r.conf_before_next is None and trace.meta.get("guided"):
            raise TraceSchemaError(f"record {k}: missing confidence/digest fields")


def _rng_digest(rng) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode("utf-8")).hexdigest()[:16]


def clamp(x: SimplexState, ids, positions, K: float) -> SimplexState:
    """Overwrite the listed rows with the +K/-K encodings of ids."""
    positions = np.asarray(positions, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    if positions.shape != ids.shape:
        raise ContractError("clamp ids/positions must align")
    out = x.copy()
    if positions.size == 0:
        return out
    if positions.min() < 0 or positions.max() >= x.seq_len:
        raise ContractError("clamp position out of range")
    out.logits[positions] = encode_tokens(ids, x.vocab_size, K).logits
    return out


def guided_update(
    x: SimplexState,
    clf_params: ParamStore,
    clf_cfg: ClassifierConfig,
    cfg: GuidanceConfig,
) -> tuple[SimplexState, ImportanceScores]:
    """Ascend log P(target | state) on the raw simplex logits.

    Runs cfg.iterations ascent steps (with iterations == 0 the gradient is
    still evaluated once so importance scores are always available). Scores
    come from the gradient of the final iteration.
    """
    cur = x.logits
    grad = None
    for _ in range(max(cfg.iterations, 1)):
        grad, _prob = state_label_gradient(clf_params, clf_cfg, cur, cfg.target_label)
        if not np.all(np.isfinite(grad)):
            raise GuidanceError("classifier gradient is not finite")
        if cfg.iterations > 0 and cfg.strength > 0:
            cur = cur + cfg.strength * grad
    return SimplexState(cur if cur is not x.logits else cur.copy()), importance_from_gradients(grad)


def _reproject(x: SimplexState, K: float) -> SimplexState:
    return encode_tokens(decode(x), x.vocab_size, K)


def generate(
    den_params: ParamStore,
    den_cfg: DenoiserConfig,
    sched: NoiseSchedule,
    policy: SchedulePolicy,
    steps: int,
    rng,
    clf_params: ParamStore | None = None,
    clf_cfg: ClassifierConfig | None = None,
    guidance: GuidanceConfig | None = None,
    constraint: LexicalConstraint | None = None,
    prompt=None,
    top_p: float = 0.9,
    key_k: int = 5,
) -> tuple[np.ndarray, GenerationTrace]:
    """Reverse-diffuse a sequence under a timestep-allocation policy.

    Per step: build the plan, denoise with per-token conditioning, project
    through top-p sampling, apply guidance inside the window (then
    re-project by argmax), clamp prompt/constraint rows, and re-noise each
    row to its next local timestep. Rows whose plan entry is 0 pass through
    untouched, so frozen tokens stay bit-identical.
    """
    n, v = den_cfg.seq_len, den_cfg.vocab_size
    if not 1 <= steps <= sched.T:
        raise ConfigError(f"steps must lie in [1, {sched.T}], got {steps}")
    if guidance is not None and guidance.window == 0.0:
        # a zero window never guides; drop to the plain sampler so traces
        # are bit-identical with an unguided run on the same seed
        guidance = None
    if policy.kind == "adaptive" and (clf_params is None or guidance is None):
        raise ConfigError("adaptive policy requires a classifier and guidance config")
    if guidance is not None and (clf_params is None or clf_cfg is None):
        raise ConfigError("guidance requires classifier parameters")
    prompt = np.asarray(prompt, dtype=np.int64) if prompt is not None else np.empty(0, np.int64)
    if prompt.size > n:
        raise ConfigError(f"prompt length {prompt.size} exceeds seq_len {n}")
    fixed_pos = list(range(prompt.size))
    fixed_ids = list(prompt)
    if constraint is not None:
        if not 0 <= constraint.eos_position < n:
            raise ConfigError(f"eos position {constraint.eos_position} out of range")
        fixed_pos.append(constraint.eos_position)
        fixed_ids.append(constraint.eos_token)
    fixed_pos = np.asarray(fixed_pos, dtype=np.int64)
    fixed_ids = np.asarray(fixed_ids, dtype=np.int64)

    alloc_rng = None
    if policy.kind == "random":
        alloc_rng = np.random.default_rng(policy.seed) if policy.seed is not None else rng.spawn(1)[0]

    guided_steps = math.ceil(guidance.window * steps) if guidance is not None else 0

    def build_plan(t_global, scores, first=False):
        if first or (policy.kind == "adaptive" and scores is None):
            # the prior is homogeneous noise at level T, so the first
            # denoise is conditioned with a constant plan; per-token
            # allocation starts with the first re-noise
            plan = allocate(SchedulePolicy("constant"), t_global, n, t_max=sched.T)
        else:
            plan = allocate(policy, t_global, n, scores=scores, rng=alloc_rng, t_max=sched.T)
        plan[fixed_pos] = 0
        return plan

    x = SimplexState(rng.standard_normal((n, v)) * sched.K)
    prev_scores: ImportanceScores | None = None
    plan = build_plan(sched.T, None, first=True)
    records: list[StepRecord] = []
    for s in range(steps, 0, -1):
        step_idx = steps - s
        t_global = int(round(sched.T * s / steps))
        tokens_in = decode(x)

        logits = denoise(den_params, den_cfg, x, plan)
        x_hat = project_top_p(logits, top_p, sched.K, rng)
        if step_idx > 0:
            frozen = plan == 0
            x_hat.logits[frozen] = x.logits[frozen]
        tokens_denoised = decode(x_hat)

        conf_pre = None
        if clf_params is not None and guidance is not None:
            conf_pre = float(classify(clf_params, clf_cfg, x_hat)[guidance.target_label])
            if records:
                records[-1].conf_before_next = conf_pre

        scores = None
        conf_after_raw = None
        if guidance is not None and step_idx < guided_steps:
            x_g, scores = guided_update(x_hat, clf_params, clf_cfg, guidance)
            conf_after_raw = float(classify(clf_params, clf_cfg, x_g)[guidance.target_label])
            x_hat = _reproject(x_g, sched.K)
            prev_scores = scores

        if fixed_pos.size:
            x_hat = clamp(x_hat, fixed_ids, fixed_pos, sched.K)
        tokens_out = decode(x_hat)

        conf_after = None
        if clf_params is not None and guidance is not None:
            conf_after = float(classify(clf_params, clf_cfg, x_hat)[guidance.target_label])

        if scores is not None:
            grad_norms = scores.g
            key_tokens = scores.top_k(min(key_k, n))
        else:
            grad_norms = np.zeros(n)
            key_tokens = np.empty(0, dtype=np.int64)

        records.append(StepRecord(
            step=step_idx,
            t_global=t_global,
            plan=plan.copy(),
            tokens=tokens_out,
            tokens_in=tokens_in,
            tokens_denoised=tokens_denoised,
            grad_norms=grad_norms,
            key_tokens=key_tokens,
            conf_after_guidance=conf_after,
            conf_before_next=None,
            conf_after_raw=conf_after_raw,
            seed_digest=_rng_digest(rng),
        ))

        if s > 1:
            t_next = int(round(sched.T * (s - 1) / steps))
            plan = build_plan(t_next, prev_scores)
            x = reverse_step(x_hat, plan, sched, rng)

    if records and records[-1].conf_before_next is None:
        records[-1].conf_before_next = records[-1].conf_after_guidance

    trace = GenerationTrace(records=records, meta={
        "schema_version": TRACE_SCHEMA_VERSION,
        "seq_len": n,
        "vocab_size": v,
        "steps": steps,
        "T": sched.T,
        "policy": policy.kind,
        "alpha_smooth": policy.alpha_smooth,
        "strength": guidance.strength if guidance else 0.0,
        "target_label": guidance.target_label if guidance else None,
        "guided": guidance is not None,
        "top_p": top_p,
        "key_k": key_k,
        "score_lag": "plans at step s use gradients from step s-1",
    })
    return decode(x_hat), trace
