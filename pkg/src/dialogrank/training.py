"""Minibatch training with Adam, validation-based stopping and checkpointing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint  # re-exported
from .encoders import ModelDims, TASKS, VARIANTS
from .metrics import MetricsReport, evaluate_examples
from .model import DialogScorer, examples_from_dataset

__all__ = ["TrainConfig", "EpochLog", "train", "save_checkpoint", "load_checkpoint"]


@dataclass
class TrainConfig:
    task: str = "visdial"
    variant: str = "qih"
    mlp_depth: int = 2
    shared_embeddings: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 5
    patience: int = 1  # epochs without a validation-MRR improvement before stopping
    seed: int = 0
    grad_clip: float | None = None  # global-norm clip; off unless set
    max_steps: int | None = None  # optional hard cap on Adam steps
    dims: ModelDims | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.dims is None:
            self.dims = ModelDims.for_task(self.task)

    def as_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    mean_train_loss: float
    steps: int
    val: MetricsReport

    def format_line(self) -> str:
        v = self.val
        return (
            f"epoch {self.epoch} loss {self.mean_train_loss:.4f} "
            f"val_mrr {v.mrr:.4f} val_r1 {v.r_at_1:.2f} val_r5 {v.r_at_5:.2f} "
            f"val_r10 {v.r_at_10:.2f} val_mean_rank {v.mean_rank:.2f}"
        )


def _snapshot(model: DialogScorer) -> dict:
    state = {"params": {}, "buffers": {}}
    for name, p in model.parameters().items():
        state["params"][name] = (p.value.copy(), p.m.copy(), p.v.copy(), p.step_count)
    for name, buf in model.buffers().items():
        state["buffers"][name] = buf.copy()
    return state


def _restore(model: DialogScorer, state: dict) -> None:
    for name, p in model.parameters().items():
        value, m, v, steps = state["params"][name]
        p.value[...] = value
        p.m[...] = m
        p.v[...] = v
        p.step_count = steps
    for name, buf in model.buffers().items():
        buf[...] = state["buffers"][name]


def _clip_grads(params, max_norm: float) -> None:
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale


def train(train_set, val_set, features, cfg: TrainConfig,
          log_fn=None) -> tuple[DialogScorer, list[EpochLog]]:
    """Train a scorer, returning the best-validation-MRR checkpoint state.

    Every run is a pure function of (datasets, features, config): the model
    init, the per-epoch example shuffles and everything downstream are driven
    by seeded generators.
    """
    train_examples = examples_from_dataset(train_set, features, cfg.task, cfg.variant, cfg.dims)
    if not train_examples:
        raise ValueError("training set produced no examples")
    val_examples = examples_from_dataset(val_set, features, cfg.task, cfg.variant, cfg.dims)
    if not val_examples:
        raise ValueError("validation set produced no examples")

    model = DialogScorer(
        cfg.dims, train_set.vocab, task=cfg.task, variant=cfg.variant,
        mlp_depth=cfg.mlp_depth, shared_embeddings=cfg.shared_embeddings,
        init_seed=cfg.seed,
    )
    params = list(model.parameters().values())
    adam = nn.AdamConfig(learning_rate=cfg.learning_rate)

    logs: list[EpochLog] = []
    best_mrr = -np.inf
    best_state = None
    stale_epochs = 0
    steps_done = 0
    out_of_steps = False

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_examples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_examples[i] for i in order[start : start + cfg.batch_size]]
            losses.append(model.batch_loss(batch))
            if cfg.grad_clip is not None:
                _clip_grads(params, cfg.grad_clip)
            nn.adam_step(params, adam)
            steps_done += 1
            if cfg.max_steps is not None and steps_done >= cfg.max_steps:
                out_of_steps = True
                break
        val_report = evaluate_examples(model, val_examples)
        entry = EpochLog(epoch=epoch, mean_train_loss=float(np.mean(losses)),
                         steps=steps_done, val=val_report)
        logs.append(entry)
        if log_fn is not None:
            log_fn(entry.format_line())
        if val_report.mrr > best_mrr:
            best_mrr = val_report.mrr
            best_state = _snapshot(model)
            stale_epochs = 0
        else:
            stale_epochs += 1
        if out_of_steps or stale_epochs >= cfg.patience:
            break

    _restore(model, best_state)
    return model, logs
