"""Joint similarity scoring and feature fusion.

Each candidate is scored independently: the context blocks and one option
embedding are concatenated into a single row and pushed through an MLP whose
hidden layers are linear -> batch norm -> ReLU and whose final layer is a
plain linear map to one scalar (normalizing the scalar would destroy the
ordering information between candidates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .encoders import EncodedContext


@dataclass
class ScoredOptions:
    scores: np.ndarray
    probabilities: np.ndarray
    predicted_index: int

    @classmethod
    def from_scores(cls, scores) -> "ScoredOptions":
        s = np.asarray(scores, dtype=np.float64).ravel()
        if s.size < 1:
            raise ValueError("cannot score an empty option set")
        nn.ensure_finite("option scores", s)
        e = np.exp(s - s.max())
        return cls(scores=s, probabilities=e / e.sum(), predicted_index=int(np.argmax(s)))


def predict(scored: ScoredOptions) -> int:
    """Index of the best option; ties go to the lowest index."""
    return scored.predicted_index


def assemble(ctx: EncodedContext, option_vec: np.ndarray) -> np.ndarray:
    """Fused row: query + image + caption + history + option, masked blocks omitted."""
    return np.concatenate(ctx.blocks() + [np.asarray(option_vec, dtype=np.float64)])


class FusionMlp:
    """Scoring MLP with one or two hidden layers of floor(input/2),
    floor(input/4) units."""

    def __init__(self, input_dim: int, depth: int, rng=None, name: str = "mlp"):
        if depth not in (1, 2):
            raise ValueError(f"mlp depth must be 1 or 2, got {depth}")
        self.input_dim = input_dim
        self.depth = depth
        widths = [input_dim, input_dim // 2]
        if depth == 2:
            widths.append(input_dim // 4)
        self.hidden_sizes = widths[1:]
        self.hidden = []
        self.norms = []
        for i in range(depth):
            self.hidden.append(nn.Linear(widths[i], widths[i + 1], rng, name=f"{name}.h{i}"))
            self.norms.append(nn.BatchNorm1d(widths[i + 1], name=f"{name}.h{i}.bn"))
        self.out = nn.Linear(widths[-1], 1, rng, name=f"{name}.out")

    def score_rows(self, rows: np.ndarray, train: bool, update_running: bool = True):
        """rows: [N, input_dim] -> scores [N]. In train mode the batch-norm
        statistics are taken over all N rows jointly."""
        x = rows
        caches = []
        for lin, bn in zip(self.hidden, self.norms):
            z, lin_cache = lin.forward(x)
            h, bn_cache = bn.forward(z, train=train, update_running=update_running)
            x, relu_cache = nn.relu(h)
            caches.append((lin_cache, bn_cache, relu_cache))
        scores, out_cache = self.out.forward(x)
        return scores[:, 0], (caches, out_cache)

    def backward_rows(self, cache, dscores: np.ndarray) -> np.ndarray:
        caches, out_cache = cache
        dx = self.out.backward(np.asarray(dscores, dtype=np.float64)[:, None], out_cache)
        for (lin_cache, bn_cache, relu_cache), lin, bn in zip(
            reversed(caches), reversed(self.hidden), reversed(self.norms)
        ):
            dh = nn.relu_backward(relu_cache, dx)
            dz = bn.backward(bn_cache, dh)
            dx = lin.backward(dz, lin_cache)
        return dx

    def parameters(self) -> dict[str, nn.Parameter]:
        out: dict[str, nn.Parameter] = {}
        for lin, bn in zip(self.hidden, self.norms):
            for p in lin.parameters() + bn.parameters():
                out[p.name] = p
        for p in self.out.parameters():
            out[p.name] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.norms):
            out[f"mlp.h{i}.bn.running_mean"] = bn.running_mean
            out[f"mlp.h{i}.bn.running_var"] = bn.running_var
        return out


def score_options(mlp: FusionMlp, ctx: EncodedContext, option_vecs, train: bool = False,
                  update_running: bool = True):
    """Score one round's candidate set.

    Eval mode scores each row separately against running statistics, so a
    candidate's score does not depend on how many or which other candidates
    are co-evaluated. Train mode norms over the given K rows jointly (the
    batched training step builds larger row sets itself).

    Returns (ScoredOptions, cache); the cache is None in eval mode.
    """
    option_vecs = np.asarray(option_vecs, dtype=np.float64)
    if option_vecs.ndim != 2:
        raise ValueError("option_vecs must be [K, option_dim]")
    k = option_vecs.shape[0]
    rows = np.stack([assemble(ctx, option_vecs[i]) for i in range(k)])
    if rows.shape[1] != mlp.input_dim:
        raise ValueError(
            f"fused row width {rows.shape[1]} does not match mlp input {mlp.input_dim}; "
            "context variant and scorer disagree"
        )
    if train:
        scores, cache = mlp.score_rows(rows, train=True, update_running=update_running)
        return ScoredOptions.from_scores(scores), cache
    scores = np.empty(k)
    for i in range(k):
        row_score, _ = mlp.score_rows(rows[i : i + 1], train=False)
        scores[i] = row_score[0]
    return ScoredOptions.from_scores(scores), None


def loss_and_grad(scored: ScoredOptions, gt_index: int):
    """Cross-entropy of the ground-truth option against the full score vector."""
    return nn.softmax_cross_entropy(scored.scores, gt_index)
