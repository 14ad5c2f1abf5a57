"""Bot-vs-bot dialog generation.

A follow-up-question model picks the next question and an answer model
answers it, alternating for a requested number of rounds. Because generated
dialogs have no dataset-provided option lists, candidate pools are built on
the fly from the dialogs of nearest-neighbor images (l2 distance between the
unit-normalized image features). The question step samples uniformly among
the top-10 ranked candidates for diversity; the answer step takes the argmax.

Every draw is seeded from (seed, image_id, round counter), so a transcript is
a pure function of (seed, checkpoints, dataset, features), and each round's
pools and scores are recorded for audit and replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .model import DialogScorer, RoundExample
from .text import (DialogDataset, ImageFeatureStore, dataset_json_bytes,
                   encode_truncate, tokenize)


@dataclass
class PoolSpec:
    n_neighbor_images: int = 10
    pool_size: int = 100
    top_m: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.pool_size >= self.top_m >= 1:
            raise ValueError("need pool_size >= top_m >= 1")
        if self.n_neighbor_images < 1:
            raise ValueError("need at least one neighbor image")


@dataclass
class DialogState:
    image_id: int
    caption: str
    history: list[tuple[str, str]] = field(default_factory=list)

    @property
    def round_counter(self) -> int:
        return len(self.history)


@dataclass
class TranscriptRound:
    question: str
    answer: str
    question_pool: list[str]
    question_scores: list[float]
    top_indices: list[int]  # best-first indices into question_pool
    draw: int  # which of the top candidates was sampled
    answer_pool: list[str]
    answer_scores: list[float]
    answer_index: int


@dataclass
class Transcript:
    image_id: int
    caption: str
    initial_history: list[tuple[str, str]]
    spec: PoolSpec
    q_model_config: dict
    a_model_config: dict
    rounds: list[TranscriptRound] = field(default_factory=list)

    def to_payload(self) -> dict:
        return {
            "image_id": self.image_id,
            "caption": self.caption,
            "initial_history": [list(p) for p in self.initial_history],
            "spec": asdict(self.spec),
            "q_model": self.q_model_config,
            "a_model": self.a_model_config,
            "rounds": [asdict(r) for r in self.rounds],
        }

    def to_bytes(self) -> bytes:
        return dataset_json_bytes(self.to_payload())


def nearest_images(features: ImageFeatureStore, image_id: int, n: int) -> list[int]:
    """The n closest other images by l2 distance; ties break by id."""
    query = features.get(image_id)
    others = np.array([i for i in features.ids() if i != image_id])
    if others.size == 0:
        return []
    dists = np.array([np.linalg.norm(features.get(int(i)) - query) for i in others])
    order = np.lexsort((others, dists))
    return [int(others[i]) for i in order[:n]]


_KIND_CODE = {"question": 0, "answer": 1}


def build_pool(kind: str, state: DialogState, dataset: DialogDataset,
               features: ImageFeatureStore, spec: PoolSpec) -> list[str]:
    """Candidate strings gathered from the nearest images' dialogs.

    Deduplicates, drops questions already asked in this dialog, and pads with
    uniform draws from the full corpus pool (or everything left, when the
    corpus cannot fill pool_size). The padding generator is seeded from
    (seed, image_id, round counter, 0 for question pools / 1 for answer
    pools)."""
    if kind not in _KIND_CODE:
        raise ValueError(f"unknown pool kind {kind!r}")
    pool_source = dataset.questions if kind == "question" else dataset.answers
    excluded = {q for q, _ in state.history} if kind == "question" else set()

    by_image = {r.image_id: r for r in dataset.records}
    items: list[str] = []
    seen: set[str] = set(excluded)
    for img in nearest_images(features, state.image_id, spec.n_neighbor_images):
        record = by_image.get(img)
        if record is None:
            continue
        for rnd in record.rounds:
            s = (pool_source[rnd.question] if kind == "question"
                 else pool_source[rnd.answer])
            if s not in seen:
                seen.add(s)
                items.append(s)
    del items[spec.pool_size :]
    if len(items) < spec.pool_size:
        available = sorted(set(pool_source) - seen)
        needed = spec.pool_size - len(items)
        if len(available) <= needed:
            items.extend(available)
        else:
            rng = np.random.default_rng(
                [spec.seed, state.image_id, state.round_counter, _KIND_CODE[kind]])
            while len(items) < spec.pool_size:
                s = pool_source[int(rng.integers(0, len(pool_source)))]
                if s not in seen:
                    seen.add(s)
                    items.append(s)
    return items


def _encode_pair(model: DialogScorer, question: str, answer: str):
    q = encode_truncate(tokenize(question), model.vocab, model.dims.max_question_words)
    a = encode_truncate(tokenize(answer), model.vocab, model.dims.max_answer_words)
    return q, a


def _model_example(model: DialogScorer, state: DialogState, features: ImageFeatureStore,
                   query: tuple[list[int], list[int] | None], pool: list[str],
                   history_pairs: list[tuple[str, str]]) -> RoundExample:
    """Assemble an eval example for one model, encoding with its own vocab and
    keeping only the most recent pairs that fit its history window."""
    window = history_pairs[len(history_pairs) - model.dims.history_slots :] \
        if len(history_pairs) > model.dims.history_slots else history_pairs
    history = [_encode_pair(model, q, a) for q, a in window]
    if model.task == "visdial-q":
        option_len = model.dims.max_question_words
    else:
        option_len = model.dims.max_answer_words
    return RoundExample(
        image_id=state.image_id,
        round_no=state.round_counter + 1,
        question_ids=query[0],
        query_answer_ids=query[1],
        option_ids=[encode_truncate(tokenize(s), model.vocab, option_len) for s in pool],
        gt_index=0,  # unused: generation has no ground truth
        caption_ids=encode_truncate(tokenize(state.caption), model.vocab,
                                    model.dims.max_caption_words),
        history=history,
        image_vec=features.get(state.image_id) if model.variant != "q" else None,
    )


def step(state: DialogState, q_model: DialogScorer, a_model: DialogScorer,
         dataset: DialogDataset, features: ImageFeatureStore,
         spec: PoolSpec) -> tuple[DialogState, TranscriptRound]:
    """One exchange: pick a follow-up question, answer it, extend the history."""
    if q_model.task != "visdial-q":
        raise ValueError("the question model must be trained for follow-up ranking")
    if a_model.task != "visdial":
        raise ValueError("the answer model must be trained for answer ranking")

    q_pool = build_pool("question", state, dataset, features, spec)
    if not q_pool:
        raise RuntimeError("no candidate questions available for this round")
    if state.history:
        query = _encode_pair(q_model, *state.history[-1])
    else:
        query = q_model.bank.empty_pair()  # caption-only start of dialog
    q_ex = _model_example(q_model, state, features, query, q_pool, state.history[:-1])
    q_scored = q_model.score_example(q_ex)
    best_first = np.lexsort((np.arange(len(q_pool)), -q_scored.scores))
    top = [int(i) for i in best_first[: min(spec.top_m, len(q_pool))]]
    rng = np.random.default_rng([spec.seed, state.image_id, state.round_counter])
    draw = int(rng.integers(0, len(top)))
    question = q_pool[top[draw]]

    a_pool = build_pool("answer", state, dataset, features, spec)
    if not a_pool:
        raise RuntimeError("no candidate answers available for this round")
    a_query = (encode_truncate(tokenize(question), a_model.vocab,
                               a_model.dims.max_question_words), None)
    a_ex = _model_example(a_model, state, features, a_query, a_pool, state.history)
    a_scored = a_model.score_example(a_ex)
    answer_index = int(np.argmax(a_scored.scores))
    answer = a_pool[answer_index]

    new_state = DialogState(
        image_id=state.image_id,
        caption=state.caption,
        history=state.history + [(question, answer)],
    )
    record = TranscriptRound(
        question=question,
        answer=answer,
        question_pool=q_pool,
        question_scores=[float(s) for s in q_scored.scores],
        top_indices=top,
        draw=draw,
        answer_pool=a_pool,
        answer_scores=[float(s) for s in a_scored.scores],
        answer_index=answer_index,
    )
    return new_state, record


def unroll(initial_state: DialogState, rounds: int, q_model: DialogScorer,
           a_model: DialogScorer, dataset: DialogDataset,
           features: ImageFeatureStore, spec: PoolSpec) -> Transcript:
    """Alternate the two models for the requested number of rounds."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    transcript = Transcript(
        image_id=initial_state.image_id,
        caption=initial_state.caption,
        initial_history=list(initial_state.history),
        spec=spec,
        q_model_config=q_model.config(),
        a_model_config=a_model.config(),
    )
    state = initial_state
    for _ in range(rounds):
        state, record = step(state, q_model, a_model, dataset, features, spec)
        transcript.rounds.append(record)
    return transcript


def verify_transcript(transcript: Transcript) -> list[str]:
    """Structural audit; returns a list of violations (empty when clean)."""
    problems = []
    asked = {q for q, _ in transcript.initial_history}
    top_m = transcript.spec.top_m
    for i, rnd in enumerate(transcript.rounds, start=1):
        if rnd.question in asked:
            problems.append(f"round {i}: question repeats an earlier one")
        asked.add(rnd.question)
        scores = np.array(rnd.question_scores)
        best_first = np.lexsort((np.arange(scores.size), -scores))
        expected_top = [int(j) for j in best_first[: min(top_m, scores.size)]]
        if rnd.top_indices != expected_top:
            problems.append(f"round {i}: recorded top candidates disagree with the scores")
        if rnd.question_pool[rnd.top_indices[rnd.draw]] != rnd.question:
            problems.append(f"round {i}: chosen question is not the recorded draw")
        a_scores = np.array(rnd.answer_scores)
        if rnd.answer_index != int(np.argmax(a_scores)):
            problems.append(f"round {i}: chosen answer does not attain the pool maximum")
        if rnd.answer_pool[rnd.answer_index] != rnd.answer:
            problems.append(f"round {i}: answer string mismatch")
    return problems
