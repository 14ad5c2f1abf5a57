"""Fixed-size feature blocks for ranking: query, caption, option and
slot-aligned history embeddings.

History is always laid out as T-1 chronological slots; rounds that do not
exist yet are padded with the encoding of the ([empty, stop], [empty, stop])
pair, so the history block has one fixed length per model regardless of how
deep into the dialog the query sits.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .text import Vocabulary

VARIANTS = ("q", "qi", "qih")
TASKS = ("visdial", "visdial-q")


@dataclass
class ModelDims:
    """All sizing knobs of the architecture (defaults are the full-scale ones)."""

    rounds: int = 10  # dialog time horizon; 9 for the follow-up-question task
    max_question_words: int = 20
    max_answer_words: int = 20
    max_caption_words: int = 40
    embed_dim: int = 128
    query_hidden: int = 512
    option_hidden: int = 512
    caption_hidden: int = 128
    history_q_hidden: int = 128
    history_a_hidden: int = 128
    history_pair_dim: int = 128
    image_dim: int = 4096

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"dims.{name} must be a positive integer, got {value!r}")

    @property
    def history_slots(self) -> int:
        return self.rounds - 1

    @property
    def history_len(self) -> int:
        return self.history_slots * self.history_pair_dim

    def fused_dim(self, variant: str) -> int:
        """Input width of the fusion MLP for a context variant."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        total = self.query_hidden + self.option_hidden
        if variant in ("qi", "qih"):
            total += self.image_dim
        if variant == "qih":
            total += self.caption_hidden + self.history_len
        return total

    @classmethod
    def for_task(cls, task: str, **overrides) -> "ModelDims":
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        overrides.setdefault("rounds", 10 if task == "visdial" else 9)
        return cls(**overrides)


@dataclass
class EncodedContext:
    """Everything of a round except the option embedding, ready for fusion."""

    variant: str
    query_vec: np.ndarray
    image_vec: np.ndarray | None = None
    caption_vec: np.ndarray | None = None
    history_vec: np.ndarray | None = None

    def blocks(self) -> list[np.ndarray]:
        out = [self.query_vec]
        if self.variant in ("qi", "qih"):
            if self.image_vec is None:
                raise ValueError(f"variant {self.variant} requires an image vector")
            out.append(self.image_vec)
        if self.variant == "qih":
            if self.caption_vec is None or self.history_vec is None:
                raise ValueError("variant qih requires caption and history vectors")
            out.extend([self.caption_vec, self.history_vec])
        return out


class EncoderBank:
    """Embedding tables and LSTM encoders for every text path of the model.

    With shared embeddings on, one table object serves the query, option,
    caption and both history paths, so its gradients accumulate from all of
    them and Adam updates it once per step.
    """

    def __init__(self, dims: ModelDims, vocab: Vocabulary, task: str, variant: str,
                 shared_embeddings: bool, rng: np.random.Generator):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.dims = dims
        self.task = task
        self.variant = variant
        self.shared_embeddings = shared_embeddings
        self.vocab_size = len(vocab)
        self.stop_id = vocab.stop_id
        self.empty_id = vocab.empty_id

        E, V = dims.embed_dim, self.vocab_size
        if shared_embeddings:
            shared = nn.Embedding(E, V, rng, name="embed.shared")
            self.embed_query = self.embed_option = shared
            self.embed_caption = self.embed_history_q = self.embed_history_a = shared
        else:
            self.embed_query = nn.Embedding(E, V, rng, name="embed.query")
            self.embed_option = nn.Embedding(E, V, rng, name="embed.option")
            if variant == "qih":
                self.embed_caption = nn.Embedding(E, V, rng, name="embed.caption")
                self.embed_history_q = nn.Embedding(E, V, rng, name="embed.history_q")
                self.embed_history_a = nn.Embedding(E, V, rng, name="embed.history_a")
            else:
                self.embed_caption = self.embed_history_q = self.embed_history_a = None

        self.lstm_query = nn.LstmEncoder(E, dims.query_hidden, rng, name="lstm.query")
        self.lstm_option = nn.LstmEncoder(E, dims.option_hidden, rng, name="lstm.option")
        if variant == "qih":
            self.lstm_caption = nn.LstmEncoder(E, dims.caption_hidden, rng, name="lstm.caption")
            self.lstm_history_q = nn.LstmEncoder(E, dims.history_q_hidden, rng,
                                                 name="lstm.history_q")
            self.lstm_history_a = nn.LstmEncoder(E, dims.history_a_hidden, rng,
                                                 name="lstm.history_a")
            self.pair_combine = nn.Linear(dims.history_q_hidden + dims.history_a_hidden,
                                          dims.history_pair_dim, rng, name="history.combine")
            self.pair_bn = nn.BatchNorm1d(dims.history_pair_dim, name="history.bn")
        else:
            self.lstm_caption = None
            self.lstm_history_q = self.lstm_history_a = None
            self.pair_combine = None
            self.pair_bn = None

    # -- sequence encoders -------------------------------------------------

    def encode_query(self, question_ids, answer_ids=None):
        """Question embedding, or question+answer for the follow-up task.

        The answer part is required exactly when the bank was built for the
        follow-up-question task; both sub-sequences keep their stop tokens.
        """
        if self.task == "visdial":
            if answer_ids is not None:
                raise ValueError("answer part not allowed in the query for answer ranking")
            seq = list(question_ids)
        else:
            if answer_ids is None:
                raise ValueError("follow-up-question ranking queries need the answer part")
            seq = list(question_ids) + list(answer_ids)
        if not seq:
            raise ValueError("empty query")
        emb, ecache = self.embed_query.lookup(seq)
        vec, lcache = self.lstm_query.encode(emb)
        return vec, (ecache, lcache)

    def backward_query(self, cache, dvec) -> None:
        ecache, lcache = cache
        demb = self.lstm_query.backward(lcache, dvec)
        self.embed_query.backward(ecache, demb)

    def encode_option(self, option_ids):
        emb, ecache = self.embed_option.lookup(option_ids)
        vec, lcache = self.lstm_option.encode(emb)
        return vec, (ecache, lcache)

    def backward_option(self, cache, dvec) -> None:
        ecache, lcache = cache
        self.embed_option.backward(ecache, self.lstm_option.backward(lcache, dvec))

    def encode_caption(self, caption_ids):
        emb, ecache = self.embed_caption.lookup(caption_ids)
        vec, lcache = self.lstm_caption.encode(emb)
        return vec, (ecache, lcache)

    def backward_caption(self, cache, dvec) -> None:
        ecache, lcache = cache
        self.embed_caption.backward(ecache, self.lstm_caption.backward(lcache, dvec))

    # -- history -----------------------------------------------------------

    def empty_pair(self) -> tuple[list[int], list[int]]:
        pad = [self.empty_id, self.stop_id]
        return pad, list(pad)

    def encode_pair_pre(self, question_ids, answer_ids):
        """Concatenated question/answer hidden states of one history round,
        before the pair-combine layer."""
        qe, qec = self.embed_history_q.lookup(question_ids)
        qv, qlc = self.lstm_history_q.encode(qe)
        ae, aec = self.embed_history_a.lookup(answer_ids)
        av, alc = self.lstm_history_a.encode(ae)
        return np.concatenate([qv, av]), (qec, qlc, aec, alc)

    def backward_pair_pre(self, cache, dpre) -> None:
        qec, qlc, aec, alc = cache
        dq = dpre[: self.dims.history_q_hidden]
        da = dpre[self.dims.history_q_hidden :]
        self.embed_history_q.backward(qec, self.lstm_history_q.backward(qlc, dq))
        self.embed_history_a.backward(aec, self.lstm_history_a.backward(alc, da))

    def combine_pairs(self, rows: np.ndarray, train: bool, update_running: bool = True):
        """Pair-combine FC -> batch norm -> ReLU over a batch of pair rows."""
        lin, lin_cache = self.pair_combine.forward(rows)
        normed, bn_cache = self.pair_bn.forward(lin, train=train, update_running=update_running)
        out, relu_cache = nn.relu(normed)
        return out, (lin_cache, bn_cache, relu_cache)

    def backward_combine_pairs(self, cache, dout: np.ndarray) -> np.ndarray:
        lin_cache, bn_cache, relu_cache = cache
        dnormed = nn.relu_backward(relu_cache, dout)
        dlin = self.pair_bn.backward(bn_cache, dnormed)
        return self.pair_combine.backward(dlin, lin_cache)

    def encode_history(self, rounds_before, train: bool = False,
                       update_running: bool = True):
        """Slot-aligned history block of length (T-1) * pair_dim.

        ``rounds_before`` is the chronological list of (question_ids,
        answer_ids) pairs already exchanged; missing slots get the empty-pair
        encoding, computed once and reused."""
        slots = self.dims.history_slots
        if len(rounds_before) > slots:
            raise ValueError(f"history holds {len(rounds_before)} rounds, model fits {slots}")
        pre_rows = np.empty((slots, self.dims.history_q_hidden + self.dims.history_a_hidden))
        pair_caches = []
        for k, (q_ids, a_ids) in enumerate(rounds_before):
            pre_rows[k], cache = self.encode_pair_pre(q_ids, a_ids)
            pair_caches.append(cache)
        n_pad = slots - len(rounds_before)
        empty_cache = None
        if n_pad:
            empty_pre, empty_cache = self.encode_pair_pre(*self.empty_pair())
            pre_rows[len(rounds_before) :] = empty_pre
        if train:
            combined, comb_cache = self.combine_pairs(pre_rows, train=True,
                                                      update_running=update_running)
        else:
            # row-at-a-time in eval: each slot's encoding is independent of the
            # others, and all padded slots share one bitwise-identical vector
            combined = np.empty((slots, self.dims.history_pair_dim))
            comb_cache = None
            for k in range(len(rounds_before)):
                row, _ = self.combine_pairs(pre_rows[k : k + 1], train=False)
                combined[k] = row[0]
            if n_pad:
                pad_row, _ = self.combine_pairs(
                    pre_rows[len(rounds_before) : len(rounds_before) + 1], train=False)
                combined[len(rounds_before) :] = pad_row[0]
        vec = combined.reshape(-1)
        return vec, (pair_caches, empty_cache, comb_cache, len(rounds_before))

    def backward_history(self, cache, dvec) -> None:
        """Backward for a train-mode encode_history call."""
        pair_caches, empty_cache, comb_cache, n_real = cache
        if comb_cache is None:
            raise RuntimeError("history backward requires a train-mode forward")
        dcombined = dvec.reshape(self.dims.history_slots, self.dims.history_pair_dim)
        dpre = self.backward_combine_pairs(comb_cache, dcombined)
        for k, pc in enumerate(pair_caches):
            self.backward_pair_pre(pc, dpre[k])
        if empty_cache is not None:
            # all padded slots share one forward pass; their grads sum
            self.backward_pair_pre(empty_cache, dpre[n_real:].sum(axis=0))

    # -- registry ----------------------------------------------------------

    def parameters(self) -> dict[str, nn.Parameter]:
        out: dict[str, nn.Parameter] = {}
        embeds = [self.embed_query, self.embed_option, self.embed_caption,
                  self.embed_history_q, self.embed_history_a]
        for table in embeds:
            if table is not None and table.weight.name not in out:
                out[table.weight.name] = table.weight
        lstms = [self.lstm_query, self.lstm_option, self.lstm_caption,
                 self.lstm_history_q, self.lstm_history_a]
        for enc in lstms:
            if enc is not None:
                out[enc.weight.name] = enc.weight
                out[enc.bias.name] = enc.bias
        if self.pair_combine is not None:
            out[self.pair_combine.weight.name] = self.pair_combine.weight
            out[self.pair_combine.bias.name] = self.pair_combine.bias
            out[self.pair_bn.gamma.name] = self.pair_bn.gamma
            out[self.pair_bn.beta.name] = self.pair_bn.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        if self.pair_bn is None:
            return {}
        return {
            "history.bn.running_mean": self.pair_bn.running_mean,
            "history.bn.running_var": self.pair_bn.running_var,
        }
