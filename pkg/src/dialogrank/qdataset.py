"""Re-purpose an answer-ranking dialog corpus for follow-up-question ranking.

For every question-answer pair at rounds 1..9, a set of 100 unique candidate
follow-up questions is assembled from four sources, in order:

  correct    the question the human actually asked next;
  plausible  follow-ups of the 50 nearest QA pairs under l2 distance on a
             word-vector key (never from the query's own image, never a
             dialog's last round, since that one has no follow-up);
  popular    the 30 most frequent questions of the corpus;
  random     seeded uniform draws from the question pool until the set
             reaches 100 unique strings.

Candidates are deduplicated by exact string at every stage, keeping the
earliest provenance label. The per-round PRNG is seeded from
(seed, image_id, round) and the assembled set is shuffled with it, so the
output bytes are a pure function of (dataset, word vectors, seed) and
independent of build order.

The QA key is: word vectors of the question's first three words concatenated
(missing slots and unknown words are zero), then the mean vector of the
remaining question words (unknown words count as zero vectors), then the mean
vector of the answer's known words; punctuation tokens are dropped before
composition and words are used raw, before any vocabulary unk-mapping.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .text import (DATASET_FORMAT, DialogDataset, DialogRecord, GloveTable,
                   ROUNDS_PER_DIALOG, tokenize)

N_PLAUSIBLE = 50
N_POPULAR = 30
POOL_SIZE = 100
FIRST_WORDS = 3

PUNCT_TOKENS = frozenset({"?", ",", ".", "!", "'"})


def content_words(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in PUNCT_TOKENS]


def embed_question_glove(tokens, glove: GloveTable) -> np.ndarray:
    """First three word vectors concatenated, then the mean of the rest.

    Words without a vector contribute zeros; questions shorter than three
    words zero-pad the missing head slots; no remaining words gives a zero
    mean block."""
    if not tokens:
        raise ValueError("cannot embed an empty question")
    d = glove.dim
    out = np.zeros((FIRST_WORDS + 1) * d)
    for i, word in enumerate(tokens[:FIRST_WORDS]):
        vec = glove.get(word)
        if vec is not None:
            out[i * d : (i + 1) * d] = vec
    rest = tokens[FIRST_WORDS:]
    if rest:
        acc = np.zeros(d)
        for word in rest:
            vec = glove.get(word)
            if vec is not None:
                acc += vec
        out[FIRST_WORDS * d :] = acc / len(rest)
    return out


def embed_answer_glove(tokens, glove: GloveTable) -> np.ndarray:
    """Mean vector over the answer's in-table words; all-unknown gives zeros."""
    if not tokens:
        raise ValueError("cannot embed an empty answer")
    acc = np.zeros(glove.dim)
    known = 0
    for word in tokens:
        vec = glove.get(word)
        if vec is not None:
            acc += vec
            known += 1
    return acc / known if known else acc


def qa_pair_key(question: str, answer: str, glove: GloveTable) -> np.ndarray:
    """Concatenated question and answer keys, dimension 5 * d."""
    q_words = content_words(question)
    a_words = content_words(answer)
    q_key = embed_question_glove(q_words, glove) if q_words else np.zeros(
        (FIRST_WORDS + 1) * glove.dim)
    a_key = embed_answer_glove(a_words, glove) if a_words else np.zeros(glove.dim)
    return np.concatenate([q_key, a_key])


@dataclass
class QaKey:
    image_id: int
    round_no: int  # 1-based
    key: np.ndarray
    followup_question: int | None  # questions-pool index; None for round 10


class CorpusKeys:
    """Precomputed QA keys for every round of every dialog."""

    def __init__(self, dataset: DialogDataset, glove: GloveTable):
        self.entries: list[QaKey] = []
        for record in dataset.records:
            for t, rnd in enumerate(record.rounds, start=1):
                followup = (record.rounds[t].question
                            if t < ROUNDS_PER_DIALOG else None)
                self.entries.append(QaKey(
                    image_id=record.image_id,
                    round_no=t,
                    key=qa_pair_key(dataset.questions[rnd.question],
                                    dataset.answers[rnd.answer], glove),
                    followup_question=followup,
                ))
        self._matrix = np.stack([e.key for e in self.entries])
        self._image_ids = np.array([e.image_id for e in self.entries])
        self._round_nos = np.array([e.round_no for e in self.entries])

    def __len__(self) -> int:
        return len(self.entries)


def find_plausible(query_key: np.ndarray, query_image_id: int, corpus: CorpusKeys,
                   k: int = N_PLAUSIBLE) -> list[QaKey]:
    """The k nearest usable QA pairs: not from the query's image, not a
    dialog's last round. Distance ties break by (image_id, round)."""
    usable = (corpus._image_ids != query_image_id) & (corpus._round_nos < ROUNDS_PER_DIALOG)
    idx = np.flatnonzero(usable)
    if idx.size == 0:
        return []
    dists = np.linalg.norm(corpus._matrix[idx] - query_key, axis=1)
    order = np.lexsort((corpus._round_nos[idx], corpus._image_ids[idx], dists))
    return [corpus.entries[idx[i]] for i in order[:k]]


def compute_popular(dataset: DialogDataset, m: int = N_POPULAR) -> list[int]:
    """Pool indices of the m most frequent question strings across all rounds.

    Frequency counts every round reference; ties break lexicographically on
    the string. Each string maps to its lowest pool index."""
    counts: Counter = Counter()
    canonical: dict[str, int] = {}
    for i, q in enumerate(dataset.questions):
        canonical.setdefault(q, i)
    for record in dataset.records:
        for rnd in record.rounds:
            counts[dataset.questions[rnd.question]] += 1
    ranked = sorted(counts, key=lambda q: (-counts[q], q))
    return [canonical[q] for q in ranked[:m]]


@dataclass
class CandidateSet:
    question_indices: list[int]  # questions-pool indices, final (shuffled) order
    gt_index: int
    provenance: list[str]
    seed: int

    def strings(self, dataset: DialogDataset) -> list[str]:
        return [dataset.questions[i] for i in self.question_indices]


def round_rng(seed: int, image_id: int, round_no: int) -> np.random.Generator:
    return np.random.default_rng([seed, image_id, round_no])


def build_candidate_set(dataset: DialogDataset, record: DialogRecord, round_t: int,
                        corpus: CorpusKeys, popular: list[int], glove: GloveTable,
                        seed: int, n_plausible: int = N_PLAUSIBLE,
                        pool_size: int = POOL_SIZE) -> CandidateSet:
    """Candidate follow-up questions for the QA pair at 1-based round_t."""
    if not 1 <= round_t < ROUNDS_PER_DIALOG:
        raise ValueError(
            f"round {round_t} has no follow-up question (valid: 1..{ROUNDS_PER_DIALOG - 1})")
    if len(set(dataset.questions)) < pool_size:
        raise ValueError(
            f"corpus has fewer than {pool_size} distinct questions; cannot build candidates")

    chosen: list[tuple[int, str]] = []  # (pool index, provenance)
    seen: set[str] = set()

    def push(pool_idx: int, label: str) -> None:
        s = dataset.questions[pool_idx]
        if s not in seen:
            seen.add(s)
            chosen.append((pool_idx, label))

    query_round = record.rounds[round_t - 1]
    push(record.rounds[round_t].question, "correct")

    key = qa_pair_key(dataset.questions[query_round.question],
                      dataset.answers[query_round.answer], glove)
    for neighbor in find_plausible(key, record.image_id, corpus, k=n_plausible):
        push(neighbor.followup_question, "plausible")
    for pool_idx in popular:
        push(pool_idx, "popular")

    rng = round_rng(seed, record.image_id, round_t)
    del chosen[pool_size:]
    while len(chosen) < pool_size:
        push(int(rng.integers(0, len(dataset.questions))), "random")
    perm = rng.permutation(pool_size)
    shuffled = [chosen[i] for i in perm]
    gt_index = next(i for i, (_, label) in enumerate(shuffled) if label == "correct")
    return CandidateSet(
        question_indices=[idx for idx, _ in shuffled],
        gt_index=gt_index,
        provenance=[label for _, label in shuffled],
        seed=seed,
    )


def build_qdataset_payload(dataset: DialogDataset, glove: GloveTable, seed: int,
                           n_plausible: int = N_PLAUSIBLE, n_popular: int = N_POPULAR,
                           pool_size: int = POOL_SIZE) -> dict:
    """Follow-up-question dataset document: the source corpus with candidate
    follow-up options attached to rounds 1..9 of every dialog."""
    corpus = CorpusKeys(dataset, glove)
    popular = compute_popular(dataset, m=n_popular)
    dialogs = []
    for record in dataset.records:
        rounds = []
        for t, rnd in enumerate(record.rounds, start=1):
            row = {
                "question": rnd.question,
                "answer": rnd.answer,
                "answer_options": list(rnd.answer_options),
                "gt_index": rnd.gt_index,
            }
            if t < ROUNDS_PER_DIALOG:
                cand = build_candidate_set(
                    dataset, record, t, corpus, popular, glove, seed,
                    n_plausible=n_plausible, pool_size=pool_size)
                row["question_options"] = cand.question_indices
                row["question_gt_index"] = cand.gt_index
                row["question_provenance"] = cand.provenance
            rounds.append(row)
        dialogs.append({
            "image_id": record.image_id,
            "caption": record.caption,
            "rounds": rounds,
        })
    return {
        "format": DATASET_FORMAT,
        "task": "visdial-q",
        "seed": seed,
        "questions": list(dataset.questions),
        "answers": list(dataset.answers),
        "dialogs": dialogs,
    }
