"""Command-line entry point wiring all subsystems together.

Configuration is plain-text ``key=value`` lines; command-line flags override
file values (last wins) and every run echoes its fully resolved configuration
and writes it next to its outputs. All subcommands are deterministic in
(inputs, flags, seed) and exit nonzero with a single-line error on failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields

from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import ModelDims, TASKS, VARIANTS
from .metrics import evaluate_model
from .model import full_model_gradcheck
from .qdataset import (N_PLAUSIBLE, N_POPULAR, POOL_SIZE, build_qdataset_payload)
from .text import (LoadError, Vocabulary, build_vocab, corpus_from_payload,
                   dataset_from_payload, dataset_json_bytes, load_features,
                   load_glove)
from .training import TrainConfig, train
from .unroll import DialogState, PoolSpec, unroll, verify_transcript

_DIM_KEYS = {f.name for f in fields(ModelDims)}
_TRAIN_KEYS = {
    "task": str, "variant": str, "mlp_depth": int, "shared_embeddings": bool,
    "learning_rate": float, "batch_size": int, "max_epochs": int, "patience": int,
    "seed": int, "grad_clip": float, "max_steps": int, "min_count": int,
}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {raw!r}")


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {body!r}")
            key, value = body.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def resolve_train_config(raw: dict[str, str]) -> TrainConfig:
    """Typed TrainConfig (with dims) from a flat key=value mapping."""
    task = raw.get("task", "visdial")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    dims_kwargs = {}
    plain: dict = {}
    for key, value in raw.items():
        if key in _DIM_KEYS:
            dims_kwargs[key] = int(value)
        elif key in _TRAIN_KEYS:
            if value.lower() == "none":
                plain[key] = None
            elif _TRAIN_KEYS[key] is bool:
                plain[key] = _parse_bool(value)
            else:
                plain[key] = _TRAIN_KEYS[key](value)
        else:
            raise ValueError(f"unknown configuration key {key!r}")
    plain.pop("min_count", None)
    plain["task"] = task
    dims = ModelDims.for_task(task, **dims_kwargs)
    return TrainConfig(dims=dims, **plain)


def _flat_config(cfg: TrainConfig, min_count: int) -> dict[str, str]:
    out = {}
    for key in sorted(_TRAIN_KEYS):
        if key == "min_count":
            out[key] = str(min_count)
            continue
        value = getattr(cfg, key)
        if isinstance(value, bool):
            value = "on" if value else "off"
        out[key] = str(value)
    for key, value in sorted(asdict(cfg.dims).items()):
        out[key] = str(value)
    return out


def _echo_config(values: dict, out_path=None) -> None:
    lines = [f"{k}={v}" for k, v in values.items()]
    for line in lines:
        print("config " + line)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")


def _load_payload(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _vocab_for_file(path, min_count: int = 1) -> Vocabulary:
    payload = _load_payload(path)
    return build_vocab(corpus_from_payload(payload), min_count=min_count)


def _merged_raw_config(args, extra_keys=()) -> dict[str, str]:
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(parse_config_file(args.config))
    for key in ("task", "variant", "mlp_depth", "shared_embeddings", "learning_rate",
                "batch_size", "max_epochs", "patience", "seed", "min_count", *extra_keys):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = str(value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    _echo_config({"dataset": args.dataset, "out": args.out,
                  "min_count": args.min_count})
    payload = _load_payload(args.dataset)
    vocab = build_vocab(corpus_from_payload(payload), min_count=args.min_count)
    vocab.save(args.out)
    print(f"vocab size={len(vocab)} out={args.out}")
    return 0


def cmd_build_qdataset(args) -> int:
    _echo_config({"dataset": args.dataset, "glove": args.glove, "seed": args.seed,
                  "out": args.out, "plausible": args.plausible,
                  "popular": args.popular, "candidates": args.candidates})
    vocab = _vocab_for_file(args.dataset)
    dataset = dataset_from_payload(_load_payload(args.dataset), vocab)
    glove = load_glove(args.glove)
    payload = build_qdataset_payload(
        dataset, glove, args.seed,
        n_plausible=args.plausible, n_popular=args.popular, pool_size=args.candidates)
    blob = dataset_json_bytes(payload)
    with open(args.out, "wb") as f:
        f.write(blob)
    digest = hashlib.sha256(blob).hexdigest()
    print(f"qdataset out={args.out} sha256={digest}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_train_config(_merged_raw_config(args))
    min_count = int(_merged_raw_config(args).get("min_count", 1))
    _echo_config(_flat_config(cfg, min_count), args.out + ".config")
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = _vocab_for_file(args.train, min_count=min_count)
    kwargs = dict(
        max_question_words=cfg.dims.max_question_words,
        max_answer_words=cfg.dims.max_answer_words,
        max_caption_words=cfg.dims.max_caption_words,
    )
    train_set = dataset_from_payload(_load_payload(args.train), vocab, **kwargs)
    val_set = dataset_from_payload(_load_payload(args.val), vocab, **kwargs)
    features = load_features(args.features) if args.features else None
    log_lines = []

    def log_fn(line: str) -> None:
        log_lines.append(line)
        print(line)

    model, logs = train(train_set, val_set, features, cfg, log_fn=log_fn)
    save_checkpoint(model, args.out, extra_config={"train": _flat_config(cfg, min_count)})
    with open(args.out + ".log", "w", encoding="utf-8") as f:
        f.write("\n".join(log_lines) + "\n")
    best = max(logs, key=lambda entry: entry.val.mrr)
    print(f"checkpoint out={args.out} best_epoch={best.epoch} best_val_mrr={best.val.mrr:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    _echo_config({"checkpoint": args.checkpoint, "dataset": args.dataset,
                  "features": args.features, "task": args.task,
                  "rank_log": args.rank_log})
    model, _ = load_checkpoint(args.checkpoint)
    dataset = dataset_from_payload(
        _load_payload(args.dataset), model.vocab,
        max_question_words=model.dims.max_question_words,
        max_answer_words=model.dims.max_answer_words,
        max_caption_words=model.dims.max_caption_words)
    features = load_features(args.features) if args.features else None
    report = evaluate_model(model, dataset, features, args.task, rank_log_path=args.rank_log)
    print(f"n = {report.n}")
    print(f"MRR = {report.mrr:.4f}")
    print(f"R@1 = {report.r_at_1:.2f}")
    print(f"R@5 = {report.r_at_5:.2f}")
    print(f"R@10 = {report.r_at_10:.2f}")
    print(f"mean_rank = {report.mean_rank:.2f}")
    print(f"tie_policy = {report.tie_policy}")
    return 0


def cmd_unroll(args) -> int:
    _echo_config({"q_checkpoint": args.q_checkpoint, "a_checkpoint": args.a_checkpoint,
                  "dataset": args.dataset, "features": args.features, "out": args.out,
                  "image_id": args.image_id, "rounds": args.rounds,
                  "start_rounds": args.start_rounds, "seed": args.seed,
                  "neighbors": args.neighbors, "pool_size": args.pool_size,
                  "top_m": args.top_m})
    q_model, _ = load_checkpoint(args.q_checkpoint)
    a_model, _ = load_checkpoint(args.a_checkpoint)
    vocab = _vocab_for_file(args.dataset)
    dataset = dataset_from_payload(_load_payload(args.dataset), vocab)
    features = load_features(args.features)
    spec = PoolSpec(n_neighbor_images=args.neighbors, pool_size=args.pool_size,
                    top_m=args.top_m, seed=args.seed)
    by_image = {r.image_id: r for r in dataset.records}
    if args.image_id is not None:
        if args.image_id not in by_image:
            raise LoadError(f"image {args.image_id}: not in the dataset")
        record = by_image[args.image_id]
    else:
        record = dataset.records[0]
    history = [
        (dataset.questions[rnd.question], dataset.answers[rnd.answer])
        for rnd in record.rounds[: args.start_rounds]
    ]
    state = DialogState(image_id=record.image_id, caption=record.caption, history=history)
    transcript = unroll(state, args.rounds, q_model, a_model, dataset, features, spec)
    problems = verify_transcript(transcript)
    if problems:
        raise RuntimeError("; ".join(problems))
    blob = transcript.to_bytes()
    with open(args.out, "wb") as f:
        f.write(blob)
    print(f"transcript image_id={record.image_id} rounds={len(transcript.rounds)} "
          f"out={args.out} sha256={hashlib.sha256(blob).hexdigest()}")
    for i, rnd in enumerate(transcript.rounds, start=1):
        print(f"round {i}: Q: {rnd.question} | A: {rnd.answer}")
    return 0


def cmd_gradcheck(args) -> int:
    _echo_config({"seed": args.seed, "seeds": args.seeds, "k_options": args.k_options,
                  "vocab_size": args.vocab_size, "tolerance": args.tolerance})
    worst = 0.0
    ok = True
    for seed in range(args.seed, args.seed + args.seeds):
        report = full_model_gradcheck(seed=seed, k_options=args.k_options,
                                      vocab_size=args.vocab_size,
                                      tolerance=args.tolerance)
        print(f"seed {seed}: {report.summary()}")
        worst = max(worst, report.max_rel_error)
        ok = ok and report.passed
    print(f"gradcheck max_rel_error={worst:.3e} seeds={args.seeds} "
          f"{'OK' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dialogrank",
        description="Discriminative visual-dialog ranking: train, evaluate, "
                    "build follow-up-question datasets, and unroll dialogs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a dataset")
    p.add_argument("--dataset", required=True, help="dialog dataset JSON")
    p.add_argument("--out", required=True, help="output vocabulary file (one word per line)")
    p.add_argument("--min-count", type=int, default=1, dest="min_count",
                   help="minimum word frequency (default 1)")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("build-qdataset",
                       help="attach follow-up-question candidates to a dataset")
    p.add_argument("--dataset", required=True, help="source dialog dataset JSON")
    p.add_argument("--glove", required=True, help="word-vector file")
    p.add_argument("--seed", type=int, default=0, help="construction seed (default 0)")
    p.add_argument("--out", required=True, help="output dataset JSON")
    p.add_argument("--plausible", type=int, default=N_PLAUSIBLE,
                   help=f"nearest QA pairs to mine (default {N_PLAUSIBLE})")
    p.add_argument("--popular", type=int, default=N_POPULAR,
                   help=f"most frequent questions to add (default {N_POPULAR})")
    p.add_argument("--candidates", type=int, default=POOL_SIZE,
                   help=f"candidate set size (default {POOL_SIZE})")
    p.set_defaults(func=cmd_build_qdataset)

    p = sub.add_parser("train", help="train a ranking model")
    p.add_argument("--train", required=True, help="training dataset JSON")
    p.add_argument("--val", required=True, help="validation dataset JSON")
    p.add_argument("--features",
                   help="image feature file (default none; required unless variant q)")
    p.add_argument("--vocab", help="vocabulary file (default: built from the training set)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", help="key=value configuration file (default none)")
    p.add_argument("--task", choices=TASKS, help="ranking direction (default visdial)")
    p.add_argument("--variant", choices=VARIANTS, help="context blocks (default qih)")
    p.add_argument("--mlp-depth", type=int, choices=(1, 2), dest="mlp_depth",
                   help="hidden layers in the scorer (default 2)")
    p.add_argument("--shared-embeddings", choices=("on", "off"), dest="shared_embeddings",
                   help="one word table for all encoders (default on)")
    p.add_argument("--learning-rate", type=float, dest="learning_rate",
                   help="Adam learning rate (default 1e-3)")
    p.add_argument("--batch-size", type=int, dest="batch_size",
                   help="examples per step (default 32)")
    p.add_argument("--max-epochs", type=int, dest="max_epochs",
                   help="epoch cap (default 5)")
    p.add_argument("--patience", type=int,
                   help="stale validation epochs before stopping (default 1)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--min-count", type=int, dest="min_count",
                   help="vocabulary frequency threshold (default 1)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any configuration key (repeatable, highest precedence)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--dataset", required=True, help="dataset JSON to score")
    p.add_argument("--features",
                   help="image feature file (default none; required unless variant q)")
    p.add_argument("--task", choices=TASKS, required=True,
                   help="ranking direction the checkpoint must match")
    p.add_argument("--rank-log", dest="rank_log",
                   help="write per-round ranks here (default: no log)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("unroll", help="generate a dialog with two checkpoints")
    p.add_argument("--q-checkpoint", required=True, dest="q_checkpoint",
                   help="follow-up-question model")
    p.add_argument("--a-checkpoint", required=True, dest="a_checkpoint",
                   help="answer model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="transcript JSON path")
    p.add_argument("--image-id", type=int, dest="image_id",
                   help="dialog image (default: first record)")
    p.add_argument("--rounds", type=int, default=10, help="exchanges to generate (default 10)")
    p.add_argument("--start-rounds", type=int, default=0, dest="start_rounds",
                   help="seed the history with this many dataset rounds (default 0)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.add_argument("--neighbors", type=int, default=10,
                   help="images mined for each pool (default 10)")
    p.add_argument("--pool-size", type=int, default=100, dest="pool_size",
                   help="candidates per pool (default 100)")
    p.add_argument("--top-m", type=int, default=10, dest="top_m",
                   help="question candidates sampled from (default 10)")
    p.set_defaults(func=cmd_unroll)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full model at reduced size")
    p.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (default 5)")
    p.add_argument("--k-options", type=int, default=5, dest="k_options",
                   help="candidate options in the probe example (default 5)")
    p.add_argument("--vocab-size", type=int, default=50, dest="vocab_size",
                   help="synthetic vocabulary size (default 50)")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="max relative error allowed (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line, machine-parseable failure
        message = str(exc).replace("\n", " ")
        print(f"error type={type(exc).__name__} message={message!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
