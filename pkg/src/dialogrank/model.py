"""End-to-end ranking model: encoder bank feeding the fusion scorer.

The training step works on a minibatch of round examples at once because the
batch-norm batches are defined across the whole step: the pair-combine norm
sees every history slot row of the minibatch, and the MLP norms see every
(context, option) row. Evaluation scores rows one at a time against running
statistics, so eval scores are independent of batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import nn
from .encoders import EncoderBank, EncodedContext, ModelDims, TASKS, VARIANTS
from .scorer import FusionMlp, ScoredOptions, score_options
from .text import DialogDataset, ImageFeatureStore, Vocabulary


@dataclass
class RoundExample:
    """One scoring instance: a query round with its candidate set and context."""

    image_id: int
    round_no: int  # 1-based round of the query
    question_ids: list[int]
    option_ids: list[list[int]]
    gt_index: int
    query_answer_ids: list[int] | None = None  # follow-up task: the answer of the pair
    caption_ids: list[int] | None = None
    history: list[tuple[list[int], list[int]]] = field(default_factory=list)
    image_vec: np.ndarray | None = None


def examples_from_dataset(dataset: DialogDataset, features: ImageFeatureStore | None,
                          task: str, variant: str, dims: ModelDims) -> list[RoundExample]:
    """Flatten a dialog dataset into per-round scoring examples.

    Rounds beyond the model horizon are skipped; for the follow-up task only
    rounds carrying candidate follow-up questions become examples."""
    if task == "visdial-q" and dataset.task != "visdial-q":
        raise ValueError("follow-up-question training needs a dataset with question options")
    needs_image = variant in ("qi", "qih")
    if needs_image:
        if features is None:
            raise ValueError(f"variant {variant} needs image features")
        if features.dim != dims.image_dim:
            raise ValueError(
                f"feature store dimension {features.dim} != configured image_dim {dims.image_dim}"
            )
    out = []
    for record in dataset.records:
        image_vec = features.get(record.image_id) if needs_image else None
        history: list[tuple[list[int], list[int]]] = []
        for t, rnd in enumerate(record.rounds, start=1):
            if t <= dims.rounds:
                if task == "visdial":
                    out.append(RoundExample(
                        image_id=record.image_id,
                        round_no=t,
                        question_ids=rnd.question_ids,
                        option_ids=[dataset.answer_ids[i] for i in rnd.answer_options],
                        gt_index=rnd.gt_index,
                        caption_ids=record.caption_ids,
                        history=list(history),
                        image_vec=image_vec,
                    ))
                elif rnd.question_options is not None:
                    out.append(RoundExample(
                        image_id=record.image_id,
                        round_no=t,
                        question_ids=rnd.question_ids,
                        query_answer_ids=rnd.answer_ids,
                        option_ids=[dataset.question_ids[i] for i in rnd.question_options],
                        gt_index=rnd.question_gt_index,
                        caption_ids=record.caption_ids,
                        history=list(history),
                        image_vec=image_vec,
                    ))
            history.append((rnd.question_ids, rnd.answer_ids))
    return out


class DialogScorer:
    """Encoder bank + fusion MLP with a stable parameter registry."""

    def __init__(self, dims: ModelDims, vocab: Vocabulary, task: str = "visdial",
                 variant: str = "qih", mlp_depth: int = 2, shared_embeddings: bool = True,
                 init_seed: int = 0):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.dims = dims
        self.vocab = vocab
        self.task = task
        self.variant = variant
        self.mlp_depth = mlp_depth
        self.shared_embeddings = shared_embeddings
        self.init_seed = init_seed
        rng = np.random.default_rng(init_seed)
        self.bank = EncoderBank(dims, vocab, task, variant, shared_embeddings, rng)
        self.mlp = FusionMlp(dims.fused_dim(variant), mlp_depth, rng)
        # fused-row column layout: query | image | caption | history | option
        start = 0
        self._q_cols = slice(start, start + dims.query_hidden)
        start += dims.query_hidden
        if variant in ("qi", "qih"):
            self._img_cols = slice(start, start + dims.image_dim)
            start += dims.image_dim
        else:
            self._img_cols = None
        if variant == "qih":
            self._cap_cols = slice(start, start + dims.caption_hidden)
            start += dims.caption_hidden
            self._hist_cols = slice(start, start + dims.history_len)
            start += dims.history_len
        else:
            self._cap_cols = None
            self._hist_cols = None
        self._opt_cols = slice(start, start + dims.option_hidden)

    # -- registry ------------------------------------------------------------

    def parameters(self) -> dict[str, nn.Parameter]:
        out = self.bank.parameters()
        out.update(self.mlp.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = self.bank.buffers()
        out.update(self.mlp.buffers())
        return out

    def config(self) -> dict:
        return {
            "task": self.task,
            "variant": self.variant,
            "mlp_depth": self.mlp_depth,
            "shared_embeddings": self.shared_embeddings,
            "init_seed": self.init_seed,
            "dims": asdict(self.dims),
        }

    def zero_grads(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # -- evaluation ----------------------------------------------------------

    def _check_example(self, ex: RoundExample) -> None:
        if not ex.option_ids:
            raise ValueError("example has no options")
        if self.task == "visdial-q" and ex.query_answer_ids is None:
            raise ValueError("follow-up task example is missing the query answer part")
        if self.variant in ("qi", "qih") and ex.image_vec is None:
            raise ValueError(f"variant {self.variant} example is missing image features")
        if self.variant == "qih" and ex.caption_ids is None:
            raise ValueError("variant qih example is missing the caption")

    def encode_context(self, ex: RoundExample) -> EncodedContext:
        """Eval-mode context block for one example."""
        self._check_example(ex)
        query_vec, _ = self.bank.encode_query(ex.question_ids, ex.query_answer_ids)
        caption_vec = history_vec = None
        if self.variant == "qih":
            caption_vec, _ = self.bank.encode_caption(ex.caption_ids)
            history_vec, _ = self.bank.encode_history(ex.history, train=False)
        return EncodedContext(
            variant=self.variant,
            query_vec=query_vec,
            image_vec=ex.image_vec,
            caption_vec=caption_vec,
            history_vec=history_vec,
        )

    def score_example(self, ex: RoundExample) -> ScoredOptions:
        """Eval-mode scoring of one round's candidate set."""
        ctx = self.encode_context(ex)
        vecs = np.empty((len(ex.option_ids), self.dims.option_hidden))
        for i, ids in enumerate(ex.option_ids):
            vecs[i], _ = self.bank.encode_option(ids)
        scored, _ = score_options(self.mlp, ctx, vecs, train=False)
        return scored

    # -- training ------------------------------------------------------------

    def batch_forward(self, batch: list[RoundExample], update_running: bool = True):
        """Train-mode forward over a minibatch; returns per-example scores and
        the cache bundle for batch_backward."""
        if not batch:
            raise ValueError("empty batch")
        for ex in batch:
            self._check_example(ex)
        dims = self.dims
        counts = [len(ex.option_ids) for ex in batch]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        n_rows = int(offsets[-1])

        q_caches, cap_caches, opt_caches = [], [], []
        rows = np.empty((n_rows, self.mlp.input_dim))
        for e, ex in enumerate(batch):
            block = rows[offsets[e] : offsets[e + 1]]
            q_vec, qc = self.bank.encode_query(ex.question_ids, ex.query_answer_ids)
            q_caches.append(qc)
            block[:, self._q_cols] = q_vec
            if self._img_cols is not None:
                block[:, self._img_cols] = ex.image_vec
            if self.variant == "qih":
                cap_vec, cc = self.bank.encode_caption(ex.caption_ids)
                cap_caches.append(cc)
                block[:, self._cap_cols] = cap_vec
            for k, ids in enumerate(ex.option_ids):
                opt_vec, oc = self.bank.encode_option(ids)
                opt_caches.append(oc)
                block[k, self._opt_cols] = opt_vec

        hist_bundle = None
        if self.variant == "qih":
            slots = dims.history_slots
            pre_dim = dims.history_q_hidden + dims.history_a_hidden
            pair_rows = np.empty((len(batch) * slots, pre_dim))
            pair_caches = []  # (row index, cache) for real rounds
            padded = np.zeros(len(batch) * slots, dtype=bool)
            empty_cache = None
            empty_pre = None
            for e, ex in enumerate(batch):
                base = e * slots
                if len(ex.history) > slots:
                    raise ValueError(
                        f"history holds {len(ex.history)} rounds, model fits {slots}")
                for k, (q_ids, a_ids) in enumerate(ex.history):
                    pair_rows[base + k], pc = self.bank.encode_pair_pre(q_ids, a_ids)
                    pair_caches.append((base + k, pc))
                if len(ex.history) < slots:
                    if empty_pre is None:
                        empty_pre, empty_cache = self.bank.encode_pair_pre(
                            *self.bank.empty_pair())
                    pair_rows[base + len(ex.history) :] = empty_pre
                    padded[base + len(ex.history) : base + slots] = True
            combined, comb_cache = self.bank.combine_pairs(
                pair_rows, train=True, update_running=update_running)
            hist_vecs = combined.reshape(len(batch), dims.history_len)
            for e in range(len(batch)):
                rows[offsets[e] : offsets[e + 1], self._hist_cols] = hist_vecs[e]
            hist_bundle = (pair_caches, empty_cache, padded, comb_cache)

        flat_scores, mlp_cache = self.mlp.score_rows(
            rows, train=True, update_running=update_running)
        scores = [flat_scores[offsets[e] : offsets[e + 1]] for e in range(len(batch))]
        bundle = (batch, offsets, q_caches, cap_caches, opt_caches, hist_bundle, mlp_cache)
        return scores, bundle

    def batch_backward(self, bundle, dscores: list[np.ndarray]) -> None:
        batch, offsets, q_caches, cap_caches, opt_caches, hist_bundle, mlp_cache = bundle
        flat = np.concatenate(dscores)
        drows = self.mlp.backward_rows(mlp_cache, flat)
        dhist_rows = None
        if self.variant == "qih":
            dhist_rows = np.empty((len(batch), self.dims.history_len))
        opt_i = 0
        for e, ex in enumerate(batch):
            block = drows[offsets[e] : offsets[e + 1]]
            self.bank.backward_query(q_caches[e], block[:, self._q_cols].sum(axis=0))
            if self.variant == "qih":
                self.bank.backward_caption(cap_caches[e], block[:, self._cap_cols].sum(axis=0))
                dhist_rows[e] = block[:, self._hist_cols].sum(axis=0)
            for k in range(len(ex.option_ids)):
                self.bank.backward_option(opt_caches[opt_i], block[k, self._opt_cols])
                opt_i += 1
        if self.variant == "qih":
            pair_caches, empty_cache, padded, comb_cache = hist_bundle
            dcombined = dhist_rows.reshape(-1, self.dims.history_pair_dim)
            dpair_rows = self.bank.backward_combine_pairs(comb_cache, dcombined)
            for row_i, pc in pair_caches:
                self.bank.backward_pair_pre(pc, dpair_rows[row_i])
            if empty_cache is not None:
                # every padded slot shares one forward pass, so their grads sum
                self.bank.backward_pair_pre(empty_cache, dpair_rows[padded].sum(axis=0))

    def batch_loss(self, batch: list[RoundExample], want_grads: bool = True,
                   update_running: bool = True) -> float:
        """Mean cross-entropy over the minibatch; optionally accumulates grads."""
        scores, bundle = self.batch_forward(batch, update_running=update_running)
        total = 0.0
        dscores = []
        for ex, s in zip(batch, scores):
            loss, grad = nn.softmax_cross_entropy(s, ex.gt_index)
            total += loss
            dscores.append(grad / len(batch))
        if want_grads:
            self.batch_backward(bundle, dscores)
        return total / len(batch)


def reduced_check_dims(rounds: int = 4) -> ModelDims:
    """Small dimension set for full-model gradient checking."""
    return ModelDims(
        rounds=rounds,
        embed_dim=8,
        query_hidden=16,
        option_hidden=16,
        caption_hidden=8,
        history_q_hidden=8,
        history_a_hidden=8,
        history_pair_dim=8,
        image_dim=12,
    )


def synthetic_vocab(size: int = 50) -> Vocabulary:
    from .text import RESERVED_WORDS

    if size < len(RESERVED_WORDS) + 1:
        raise ValueError("vocabulary too small")
    return Vocabulary(list(RESERVED_WORDS) + [f"w{i}" for i in range(size - len(RESERVED_WORDS))])


def random_example(vocab: Vocabulary, dims: ModelDims, rng: np.random.Generator,
                   k_options: int = 5, task: str = "visdial",
                   n_history: int | None = None) -> RoundExample:
    """Random round example over the synthetic vocabulary, for checks and tests."""

    def seq(lo, hi):
        n = int(rng.integers(lo, hi + 1))
        ids = list(rng.integers(3, len(vocab), size=n))
        return [int(i) for i in ids] + [vocab.stop_id]

    if n_history is None:
        n_history = int(rng.integers(0, dims.history_slots + 1))
    image_vec = rng.normal(size=dims.image_dim)
    image_vec /= np.linalg.norm(image_vec)
    return RoundExample(
        image_id=int(rng.integers(0, 1 << 30)),
        round_no=n_history + 1,
        question_ids=seq(2, 5),
        query_answer_ids=seq(1, 3) if task == "visdial-q" else None,
        option_ids=[seq(1, 4) for _ in range(k_options)],
        gt_index=int(rng.integers(0, k_options)),
        caption_ids=seq(3, 6),
        history=[(seq(2, 4), seq(1, 3)) for _ in range(n_history)],
        image_vec=image_vec,
    )


def full_model_gradcheck(seed: int, dims: ModelDims | None = None, vocab_size: int = 50,
                         k_options: int = 5, task: str = "visdial", variant: str = "qih",
                         mlp_depth: int = 2, shared_embeddings: bool = True,
                         h: float = 1e-5, tolerance: float = 1e-4) -> nn.GradCheckReport:
    """Finite-difference check of every parameter gradient of the full model.

    Builds a reduced-dimension model and one random round example, then
    compares the analytic training-step gradient of each coordinate against
    central differences. Running statistics are frozen so the closure is a
    pure function of the parameters.
    """
    dims = dims or reduced_check_dims()
    vocab = synthetic_vocab(vocab_size)
    model = DialogScorer(dims, vocab, task=task, variant=variant, mlp_depth=mlp_depth,
                         shared_embeddings=shared_embeddings, init_seed=seed)
    rng = np.random.default_rng([seed, 0xD1A6])
    batch = [random_example(vocab, dims, rng, k_options=k_options, task=task,
                            n_history=min(2, dims.history_slots))]

    def closure(want_grads: bool) -> float:
        if want_grads:
            model.zero_grads()
        return model.batch_loss(batch, want_grads=want_grads, update_running=False)

    return nn.grad_check(closure, model.parameters(), h=h, tolerance=tolerance)
