"""Operator command surface.

    tta train    --config cfg.json [--out DIR] [--seed N]
    tta reduce   --config cfg.json [--out DIR] [--seed N] [--teacher CKPT]
    tta generate --config cfg.json [--out DIR] [--seed N] [--checkpoints DIR]
    tta analyze  --config cfg.json RUN_DIR [--out DIR]
    tta duality  --config cfg.json [--out DIR] [--seed N]

Exit codes: 0 success, 2 configuration/usage error, 3 runtime error. Every
command writes a manifest sufficient to re-execute the stage; rerunning
with the same config and seed reproduces primary artifacts byte-for-byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, corpus as corpus_mod, metrics
from .allocation import SchedulePolicy, duality_schedule
from .config import RunConfig, default_config, load_config
from .diffusion import cosine_schedule
from .errors import ConfigError, TtaError
from .guidance import GenerationTrace, GuidanceConfig, LexicalConstraint, generate, validate_trace
from .models import (
    ClassifierConfig,
    DenoiserConfig,
    ReduceHyper,
    TrainHyper,
    classifier_accuracy,
    fit_reference_lm,
    reduce_steps,
    rollout_cross_entropy,
    train_classifier,
    train_denoiser,
)

# seed-stream namespaces so stages never share randomness
STREAM_TRAIN, STREAM_REDUCE, STREAM_GENERATE, STREAM_DUALITY = 0, 1, 2, 3


def derive_rng(master: int, *key: int):
    return np.random.default_rng(np.random.SeedSequence([master, *key]))


def _schedule(cfg: RunConfig):
    s = cfg["schedule"]
    return cosine_schedule(int(s["T"]), K=float(s["K"]), s=float(s["s"]))


def _den_cfg(cfg: RunConfig) -> DenoiserConfig:
    m, c = cfg["model"], cfg["corpus"]
    return DenoiserConfig(
        vocab_size=int(c["vocab_size"]), seq_len=int(c["seq_len"]),
        d_model=int(m["d"]), heads=int(m["heads"]), ff=int(m["ff"]),
        blocks=int(m["blocks"]),
        use_position_embeddings=bool(m["use_position_embeddings"]),
    )


def _clf_cfg(cfg: RunConfig) -> ClassifierConfig:
    m, c = cfg["model"], cfg["corpus"]
    return ClassifierConfig(
        vocab_size=int(c["vocab_size"]), n_labels=len(c["labels"]),
        d_model=int(m["d"]), hidden=int(m["classifier_hidden"]),
        tau=float(m["tau"]),
    )


def _load_corpus(cfg: RunConfig, out_dir: Path | None):
    path = cfg["corpus"]["path"]
    if path is not None:
        spec, examples = corpus_mod.load_corpus(path)
    else:
        spec = cfg.corpus_spec()
        examples = corpus_mod.synthesize(spec)
        if out_dir is not None:
            corpus_mod.save_corpus(out_dir / "corpus.jsonl", spec, examples)
    return spec, examples


def _write_manifest(out_dir: Path, cfg: RunConfig, command: str,
                    artifacts: dict, wall: dict, seeds: dict) -> None:
    doc = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "artifacts": artifacts,
        "wall_clock_s": wall,
        "seeds": seeds,
    }
    # one manifest per stage so chained stages in one directory keep all
    (out_dir / f"manifest_{command}.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _master_seed(cfg: RunConfig, args) -> int:
    return int(args.seed) if args.seed is not None else cfg.seed


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    seed = _master_seed(cfg, args)
    t0 = time.perf_counter()
    spec, examples = _load_corpus(cfg, out)
    train_set, test_set = corpus_mod.split(examples, 1.0 - cfg["train"]["holdout"], seed)
    ids_train, labels_train = corpus_mod.examples_to_arrays(train_set, spec.labels)
    ids_test, labels_test = corpus_mod.examples_to_arrays(test_set, spec.labels)
    sched = _schedule(cfg)
    den_cfg, clf_cfg = _den_cfg(cfg), _clf_cfg(cfg)
    tr = cfg["train"]
    wall = {"corpus": time.perf_counter() - t0}

    t0 = time.perf_counter()
    clf, _ = train_classifier(
        ids_train, labels_train, clf_cfg,
        TrainHyper(steps=int(tr["classifier_steps"]), batch=int(tr["classifier_batch"]),
                   lr=float(tr["classifier_lr"])),
        derive_rng(seed, STREAM_TRAIN, 1), K=sched.K,
    )
    clf_acc = classifier_accuracy(clf, clf_cfg, ids_test, labels_test, sched.K)
    wall["classifier"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    den, losses = train_denoiser(
        ids_train, sched, den_cfg,
        TrainHyper(steps=int(tr["steps"]), batch=int(tr["batch"]), lr=float(tr["lr"])),
        derive_rng(seed, STREAM_TRAIN, 0),
    )
    wall["denoiser"] = time.perf_counter() - t0

    meta = {
        "kind": "denoiser", "T": sched.T, "V": den_cfg.vocab_size,
        "d": den_cfg.d_model, "seq_len": den_cfg.seq_len,
        "heads": den_cfg.heads, "ff": den_cfg.ff, "blocks": den_cfg.blocks,
        "use_position_embeddings": den_cfg.use_position_embeddings,
        "K": sched.K, "s": sched.s,
    }
    checkpoint.save_params(out / "denoiser.ckpt", den, meta)
    checkpoint.write_sidecar(out / "denoiser.ckpt",
                             {"train": cfg["train"], "seed": seed,
                              "final_loss": losses[-1] if losses else None})
    clf_meta = {
        "kind": "classifier", "V": clf_cfg.vocab_size,
        "n_labels": clf_cfg.n_labels, "d": clf_cfg.d_model,
        "hidden": clf_cfg.hidden, "tau": clf_cfg.tau,
    }
    checkpoint.save_params(out / "classifier.ckpt", clf, clf_meta)
    checkpoint.write_sidecar(out / "classifier.ckpt",
                             {"train": cfg["train"], "seed": seed,
                              "holdout_accuracy": clf_acc})
    _write_manifest(out, cfg, "train",
                    {"denoiser": "denoiser.ckpt", "classifier": "classifier.ckpt",
                     "corpus": "corpus.jsonl" if cfg["corpus"]["path"] is None else cfg["corpus"]["path"]},
                    wall, {"master": seed})
    print(f"trained denoiser ({len(losses)} steps) and classifier "
          f"(holdout acc {clf_acc:.3f}) -> {out}")
    return 0


def _load_denoiser(path: Path):
    params, meta = checkpoint.load_params(path)
    if meta.get("kind") != "denoiser":
        raise ConfigError(f"{path} is not a denoiser checkpoint")
    cfg = DenoiserConfig(
        vocab_size=int(meta["V"]), seq_len=int(meta["seq_len"]),
        d_model=int(meta["d"]), heads=int(meta["heads"]), ff=int(meta["ff"]),
        blocks=int(meta["blocks"]),
        use_position_embeddings=bool(meta["use_position_embeddings"]),
    )
    sched = cosine_schedule(int(meta["T"]), K=float(meta["K"]), s=float(meta["s"]))
    return params, cfg, sched


def _load_classifier(path: Path):
    params, meta = checkpoint.load_params(path)
    if meta.get("kind") != "classifier":
        raise ConfigError(f"{path} is not a classifier checkpoint")
    cfg = ClassifierConfig(
        vocab_size=int(meta["V"]), n_labels=int(meta["n_labels"]),
        d_model=int(meta["d"]), hidden=int(meta["hidden"]), tau=float(meta["tau"]),
    )
    return params, cfg


def cmd_reduce(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    seed = _master_seed(cfg, args)
    teacher_path = Path(args.teacher) if args.teacher else out / "denoiser.ckpt"
    if not teacher_path.exists():
        raise ConfigError(f"teacher checkpoint not found: {teacher_path}")
    teacher, den_cfg, teacher_sched = _load_denoiser(teacher_path)
    spec, examples = _load_corpus(cfg, None)
    train_set, test_set = corpus_mod.split(examples, 1.0 - cfg["train"]["holdout"], seed)
    ids_train, _ = corpus_mod.examples_to_arrays(train_set, spec.labels)
    ids_test, _ = corpus_mod.examples_to_arrays(test_set, spec.labels)
    red = cfg["reduce"]
    hyper = ReduceHyper(steps=int(red["finetune_steps"]), batch=int(red["batch"]),
                        lr=float(red["lr"]),
                        rollout_timesteps=int(red["rollout_timesteps"]),
                        top_p=float(cfg["generate"]["top_p"]),
                        prefix_hi=max(2, den_cfg.seq_len // 2))
    params, sched = teacher, teacher_sched
    artifacts, wall, evals = {}, {}, []
    base_T = teacher_sched.T
    for stage, ratio in enumerate(red["ladder"]):
        t0 = time.perf_counter()
        params, sched = reduce_steps(
            params, ratio * base_T / sched.T, ids_train, sched, den_cfg, hyper,
            derive_rng(seed, STREAM_REDUCE, stage),
        )
        name = f"student_T{sched.T}.ckpt"
        meta = {
            "kind": "denoiser", "T": sched.T, "V": den_cfg.vocab_size,
            "d": den_cfg.d_model, "seq_len": den_cfg.seq_len,
            "heads": den_cfg.heads, "ff": den_cfg.ff, "blocks": den_cfg.blocks,
            "use_position_embeddings": den_cfg.use_position_embeddings,
            "K": sched.K, "s": sched.s,
        }
        checkpoint.save_params(out / name, params, meta)
        checkpoint.write_sidecar(out / name, {"ratio": ratio, "seed": seed,
                                              "teacher": str(teacher_path)})
        eval_rng = derive_rng(seed, STREAM_REDUCE, 100 + stage)
        ce_student = rollout_cross_entropy(
            params, den_cfg, sched, ids_test[:64], sched.T, prefix_len=4,
            rng=eval_rng, top_p=hyper.top_p)
        eval_rng2 = derive_rng(seed, STREAM_REDUCE, 200 + stage)
        ce_teacher = rollout_cross_entropy(
            teacher, den_cfg, teacher_sched, ids_test[:64], sched.T, prefix_len=4,
            rng=eval_rng2, top_p=hyper.top_p)
        evals.append({"T": sched.T, "student_ce": ce_student,
                      "teacher_ce_same_steps": ce_teacher})
        artifacts[f"student_T{sched.T}"] = name
        wall[f"stage_{stage}"] = time.perf_counter() - t0
        print(f"stage {stage}: T={sched.T} student CE {ce_student:.4f} "
              f"vs teacher@{sched.T} steps {ce_teacher:.4f}")
    (out / "reduction_eval.json").write_text(json.dumps(evals, indent=2) + "\n",
                                             encoding="utf-8")
    artifacts["evaluation"] = "reduction_eval.json"
    _write_manifest(out, cfg, "reduce", artifacts, wall, {"master": seed})
    return 0


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    seed = _master_seed(cfg, args)
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else out
    den_path = ckpt_dir / "denoiser.ckpt"
    if not den_path.exists():
        raise ConfigError(f"denoiser checkpoint not found: {den_path}")
    den, den_cfg, sched = _load_denoiser(den_path)

    g = cfg["generate"]
    pol = g["policy"]
    policy = SchedulePolicy(kind=pol["kind"], alpha_smooth=float(pol["alpha_smooth"]),
                            seed=pol["seed"])
    clf_path = ckpt_dir / "classifier.ckpt"
    clf = clf_cfg = None
    if clf_path.exists():
        clf, clf_cfg = _load_classifier(clf_path)
    if policy.kind == "adaptive" and clf is None:
        raise ConfigError(
            "generate.policy.kind=adaptive requires a classifier checkpoint "
            f"(classifier.ckpt missing in {ckpt_dir})"
        )
    guidance = None
    if clf is not None:
        guidance = GuidanceConfig(strength=float(g["lambda"]),
                                  target_label=int(g["target_label"]),
                                  iterations=int(g["iterations"]),
                                  window=float(g["window"]))
        if guidance.target_label >= clf_cfg.n_labels:
            raise ConfigError("generate.target_label: exceeds classifier labels")
    constraint = None
    if g["constraint"] is not None:
        constraint = LexicalConstraint(kind=g["constraint"]["kind"],
                                       eos_position=int(g["constraint"]["eos_position"]),
                                       eos_token=corpus_mod.EOS_ID)
    prompt = np.asarray(g["prompt"], dtype=np.int64) if g["prompt"] is not None else None

    traces_dir = out / "traces"
    traces_dir.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    lines = []
    for i in range(int(g["num_samples"])):
        rng = derive_rng(seed, STREAM_GENERATE, i)
        tokens, trace = generate(
            den, den_cfg, sched, policy, int(g["steps"]), rng,
            clf_params=clf, clf_cfg=clf_cfg, guidance=guidance,
            constraint=constraint, prompt=prompt,
            top_p=float(g["top_p"]), key_k=int(g["key_k"]),
        )
        (traces_dir / f"trace_{i:05d}.jsonl").write_text(trace.to_jsonl(),
                                                         encoding="utf-8")
        lines.append(json.dumps({
            "sample": i,
            "seed_key": [seed, STREAM_GENERATE, i],
            "tokens": tokens.tolist(),
            "policy": policy.kind,
            "alpha_smooth": policy.alpha_smooth,
            "lambda": float(g["lambda"]) if guidance else 0.0,
            "target_label": guidance.target_label if guidance else None,
        }, sort_keys=False, separators=(",", ":")))
    (out / "samples.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(out, cfg, "generate",
                    {"samples": "samples.jsonl", "traces": "traces"},
                    {"generate": time.perf_counter() - t0},
                    {"master": seed, "per_sample": f"[{seed}, {STREAM_GENERATE}, i]"})
    print(f"wrote {g['num_samples']} samples -> {out}")
    return 0


def cmd_analyze(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir)
    out = _out_dir(cfg, args)
    trace_paths = sorted((run_dir / "traces").glob("trace_*.jsonl")) if (run_dir / "traces").is_dir() else []
    if not trace_paths:
        raise ConfigError(f"no traces found under {run_dir}")
    samples_path = run_dir / "samples.jsonl"
    if not samples_path.exists():
        raise ConfigError(f"samples.jsonl missing in {run_dir}")
    samples = [json.loads(ln) for ln in samples_path.read_text(encoding="utf-8").splitlines() if ln.strip()]

    traces = []
    for path in trace_paths:
        trace = GenerationTrace.from_jsonl(path.read_text(encoding="utf-8"))
        validate_trace(trace)
        traces.append(trace)

    spec, examples = _load_corpus(cfg, None)
    train_set, _ = corpus_mod.split(examples, 1.0 - cfg["train"]["holdout"], cfg.seed)
    ids_train, _ = corpus_mod.examples_to_arrays(train_set, spec.labels)
    lm = fit_reference_lm(ids_train, spec.vocab_size)

    k = int(cfg["generate"]["key_k"])
    for i, trace in enumerate(traces):
        rows = metrics.step_table(trace, k)
        with open(out / f"run_{i:05d}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

    final_tokens = [np.asarray(s["tokens"], dtype=np.int64) for s in samples]
    summary = metrics.run_summary(traces, final_tokens, lm=lm, k=k)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")

    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.get("policy"), s.get("lambda")), []).append(i)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "lambda", "runs", "mean_fluctuation",
                         "mean_key_change", "dist3", "ppl"])
        for (pol, lam), idxs in sorted(groups.items(), key=str):
            part = metrics.run_summary([traces[i] for i in idxs],
                                       [final_tokens[i] for i in idxs], lm=lm, k=k)
            writer.writerow([pol, lam, part["runs"], part["mean_fluctuation"],
                             part["mean_key_change"], part["dist3"], part["ppl"]])
    print(f"analyzed {len(traces)} traces -> {out}")
    return 0


def cmd_duality(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    seed = _master_seed(cfg, args)
    du = cfg["duality"]
    grid = np.linspace(0.0, 1.0, int(du["grid_points"]))
    rows = []
    t0 = time.perf_counter()
    for i, ab in enumerate(grid):
        rng = derive_rng(seed, STREAM_DUALITY, i)
        at, ad = duality_schedule(float(ab), int(du["vocab"]), rng=rng,
                                  n_draws=int(du["draws"]))
        rows.append((float(ab), at, ad))
    with open(out / "duality.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha_bar", "alpha_tilde", "alpha_disc"])
        writer.writerows(rows)
    _write_manifest(out, cfg, "duality", {"csv": "duality.csv"},
                    {"duality": time.perf_counter() - t0}, {"master": seed})
    print(f"wrote duality grid ({len(rows)} points) -> {out / 'duality.csv'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tta", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("reduce", cmd_reduce),
                     ("generate", cmd_generate), ("analyze", cmd_analyze),
                     ("duality", cmd_duality)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=False, help="path to the run config JSON")
        p.add_argument("--out", help="output directory (default: config out_dir)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.set_defaults(fn=fn)
        if name == "reduce":
            p.add_argument("--teacher", help="teacher checkpoint path")
        if name == "generate":
            p.add_argument("--checkpoints", help="directory holding the checkpoints")
        if name == "analyze":
            p.add_argument("run_dir", help="generate output directory to analyze")
    parser.add_argument("--version", action="version", version=__version__)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TtaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
