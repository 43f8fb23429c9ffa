"""Run configuration: a single versioned JSON document.

Schema (version 1, all keys required unless noted):

    {
      "schema_version": 1,
      "seed": 0,
      "out_dir": "runs/toy",
      "corpus": {"path": str | null, plus the corpus spec fields},
      "schedule": {"T": int, "s": float, "K": float},
      "model": {"d": int, "heads": int, "ff": int, "blocks": int,
                 "use_position_embeddings": bool,
                 "classifier_hidden": int, "tau": float},
      "train": {"steps", "batch", "lr", "classifier_steps",
                 "classifier_batch", "classifier_lr", "holdout"},
      "reduce": {"ladder": [float...], "finetune_steps", "batch", "lr",
                  "rollout_timesteps"},
      "generate": {"num_samples", "steps", "lambda", "iterations", "window",
                    "top_p", "target_label", "key_k",
                    "policy": {"kind", "alpha_smooth", "seed"},
                    "constraint": null | {"kind": "length",
                                           "eos_position": int},
                    "prompt": null | [int...]},
      "duality": {"vocab": int, "grid_points": int, "draws": int}
    }

Loading is lossless: ``to_dict(from_dict(d)) == d`` for any valid document.
Validation errors name the offending field path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .corpus import CorpusSpec, spec_from_dict
from .errors import ConfigError

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": 1,
    "seed": 0,
    "out_dir": "runs/toy",
    "corpus": {
        "path": None,
        "vocab_size": 64,
        "seq_len": 16,
        "labels": ["neg", "pos"],
        "size": 10000,
        "seed": 0,
        "tilt": 6.0,
        "band": 12,
    },
    "schedule": {"T": 64, "s": 0.008, "K": 5.0},
    "model": {
        "d": 48,
        "heads": 2,
        "ff": 96,
        "blocks": 2,
        "use_position_embeddings": True,
        "classifier_hidden": 32,
        "tau": 1.0,
    },
    "train": {
        "steps": 15000,
        "batch": 16,
        "lr": 3e-3,
        "classifier_steps": 1200,
        "classifier_batch": 16,
        "classifier_lr": 3e-3,
        "holdout": 0.2,
    },
    "reduce": {
        "ladder": [0.5, 0.25],
        "finetune_steps": 1200,
        "batch": 4,
        "lr": 1e-3,
        "rollout_timesteps": 4,
    },
    "generate": {
        "num_samples": 20,
        "steps": 16,
        "lambda": 2000.0,
        "iterations": 2,
        "window": 1.0,
        "top_p": 0.8,
        "target_label": 1,
        "key_k": 5,
        "policy": {"kind": "adaptive", "alpha_smooth": 0.6, "seed": None},
        "constraint": None,
        "prompt": None,
    },
    "duality": {"vocab": 2, "grid_points": 11, "draws": 100000},
}


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ConfigError(f"{path}.{key}: missing required field" if path else f"{key}: missing required field")
    return doc[key]


def _number(doc, key, path, lo=None, hi=None, integer=False, allow_none=False):
    val = _require(doc, key, path)
    where = f"{path}.{key}" if path else key
    if val is None:
        if allow_none:
            return None
        raise ConfigError(f"{where}: must not be null")
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(f"{where}: expected an integer, got {val!r}")
    if lo is not None and val < lo:
        raise ConfigError(f"{where}: must be >= {lo}, got {val}")
    if hi is not None and val > hi:
        raise ConfigError(f"{where}: must be <= {hi}, got {val}")
    return int(val) if integer else float(val)


class RunConfig:
    """Validated view over the raw config dict; the dict round-trips."""

    def __init__(self, doc: dict):
        self.doc = copy.deepcopy(doc)
        self._validate()

    # -- access helpers -----------------------------------------------------

    def __getitem__(self, section: str) -> dict:
        return self.doc[section]

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    def corpus_spec(self) -> CorpusSpec:
        c = {k: v for k, v in self.doc["corpus"].items() if k != "path"}
        return spec_from_dict(c)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def config_hash(self) -> str:
        blob = json.dumps(self.doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    # -- validation ---------------------------------------------------------

    def _validate(self):
        doc = self.doc
        if _number(doc, "schema_version", "", integer=True) != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}")
        _number(doc, "seed", "", lo=0, integer=True)
        out_dir = _require(doc, "out_dir", "")
        if not isinstance(out_dir, str) or not out_dir:
            raise ConfigError("out_dir: expected a non-empty string")

        c = _require(doc, "corpus", "")
        path = _require(c, "path", "corpus")
        if path is not None and not isinstance(path, str):
            raise ConfigError("corpus.path: expected a string or null")
        if path is None:
            try:
                self.corpus_spec()
            except ConfigError as exc:
                raise ConfigError(f"corpus: {exc}") from exc

        s = _require(doc, "schedule", "")
        _number(s, "T", "schedule", lo=1, integer=True)
        _number(s, "s", "schedule", lo=0.0)
        _number(s, "K", "schedule", lo=1e-9)

        m = _require(doc, "model", "")
        d = _number(m, "d", "model", lo=2, integer=True)
        heads = _number(m, "heads", "model", lo=1, integer=True)
        if d % heads:
            raise ConfigError("model.heads: must divide model.d")
        _number(m, "ff", "model", lo=1, integer=True)
        _number(m, "blocks", "model", lo=1, integer=True)
        if not isinstance(_require(m, "use_position_embeddings", "model"), bool):
            raise ConfigError("model.use_position_embeddings: expected a bool")
        _number(m, "classifier_hidden", "model", lo=1, integer=True)
        _number(m, "tau", "model", lo=1e-9)

        t = _require(doc, "train", "")
        for key, lo in (("steps", 0), ("batch", 1), ("classifier_steps", 0),
                        ("classifier_batch", 1)):
            _number(t, key, "train", lo=lo, integer=True)
        _number(t, "lr", "train", lo=1e-12)
        _number(t, "classifier_lr", "train", lo=1e-12)
        _number(t, "holdout", "train", lo=1e-9, hi=0.5)

        r = _require(doc, "reduce", "")
        ladder = _require(r, "ladder", "reduce")
        if not isinstance(ladder, list) or not ladder:
            raise ConfigError("reduce.ladder: expected a non-empty list")
        for i, ratio in enumerate(ladder):
            if not isinstance(ratio, (int, float)) or not 0 < ratio <= 1:
                raise ConfigError(f"reduce.ladder[{i}]: ratios must lie in (0, 1]")
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("reduce.ladder: ratios must be strictly decreasing")
        _number(r, "finetune_steps", "reduce", lo=0, integer=True)
        _number(r, "batch", "reduce", lo=1, integer=True)
        _number(r, "lr", "reduce", lo=1e-12)
        _number(r, "rollout_timesteps", "reduce", lo=1, integer=True)

        g = _require(doc, "generate", "")
        _number(g, "num_samples", "generate", lo=1, integer=True)
        _number(g, "steps", "generate", lo=1, integer=True)
        _number(g, "lambda", "generate", lo=0.0)
        _number(g, "iterations", "generate", lo=0, integer=True)
        _number(g, "window", "generate", lo=0.0, hi=1.0)
        top_p = _number(g, "top_p", "generate", hi=1.0)
        if top_p <= 0:
            raise ConfigError("generate.top_p: must lie in (0, 1]")
        _number(g, "target_label", "generate", lo=0, integer=True)
        _number(g, "key_k", "generate", lo=1, integer=True)
        pol = _require(g, "policy", "generate")
        kind = _require(pol, "kind", "generate.policy")
        from .allocation import POLICY_KINDS

        if kind not in POLICY_KINDS:
            raise ConfigError(f"generate.policy.kind: unknown kind {kind!r}")
        _number(pol, "alpha_smooth", "generate.policy", lo=0.0, hi=1.0)
        _number(pol, "seed", "generate.policy", lo=0, integer=True, allow_none=True)
        con = _require(g, "constraint", "generate")
        if con is not None:
            if _require(con, "kind", "generate.constraint") != "length":
                raise ConfigError("generate.constraint.kind: only 'length' is supported")
            _number(con, "eos_position", "generate.constraint", lo=0, integer=True)
        prompt = _require(g, "prompt", "generate")
        if prompt is not None:
            if not isinstance(prompt, list) or not all(
                isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in prompt
            ):
                raise ConfigError("generate.prompt: expected a list of token ids")

        du = _require(doc, "duality", "")
        _number(du, "vocab", "duality", lo=2, integer=True)
        _number(du, "grid_points", "duality", lo=2, integer=True)
        _number(du, "draws", "duality", lo=1, integer=True)


def default_config() -> RunConfig:
    return RunConfig(DEFAULT_CONFIG)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
