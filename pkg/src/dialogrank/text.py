"""Tokenization, vocabulary, and ingestion of dialog / word-vector / feature files.

Dialog datasets are single JSON documents with two string pools ("questions",
"answers") and "dialogs" whose rounds reference pool indices; follow-up
question datasets reuse the same layout plus per-round "question_options".
All loaded stores are immutable after load and safe for concurrent reads.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

STOP_WORD = "<stop>"
EMPTY_WORD = "<empty>"
UNK_WORD = "<unk>"
RESERVED_WORDS = (STOP_WORD, EMPTY_WORD, UNK_WORD)

DATASET_FORMAT = "visdial-desk.v1"
PROVENANCE_LABELS = ("correct", "plausible", "popular", "random")

_PUNCT = re.compile(r"([?,.!'])")


class LoadError(ValueError):
    """A file failed validation; the message names the offending record."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split out ? , . ! ' as standalone tokens, split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def detokenize(tokens) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Dense word -> id table with reserved stop/empty/unk entries."""

    def __init__(self, words: list[str]):
        self._words = list(words)
        self._ids = {w: i for i, w in enumerate(self._words)}
        if len(self._ids) != len(self._words):
            raise ValueError("vocabulary words must be unique")
        for w in RESERVED_WORDS:
            if w not in self._ids:
                raise ValueError(f"vocabulary is missing reserved token {w!r}")
        self.stop_id = self._ids[STOP_WORD]
        self.empty_id = self._ids[EMPTY_WORD]
        self.unk_id = self._ids[UNK_WORD]

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._words == other._words

    @property
    def words(self) -> list[str]:
        return list(self._words)

    def encode_word(self, word: str) -> int:
        return self._ids.get(word, self.unk_id)

    def word_of(self, token_id: int) -> str:
        return self._words[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w in self._words:
                f.write(w + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            words = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(words)


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Vocabulary over an iterable of token lists.

    Keeps words with frequency >= min_count; ids are assigned reserved tokens
    first, then by descending frequency with lexicographic ties.
    """
    counts: Counter = Counter()
    seen_any = False
    for tokens in corpus:
        seen_any = True
        counts.update(tokens)
    if not seen_any:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(list(RESERVED_WORDS) + kept)


def encode_truncate(words, vocab: Vocabulary, max_len: int) -> list[int]:
    """First max_len words as ids (OOV -> unk) with a trailing stop id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.encode_word(w) for w in words[:max_len]]
    ids.append(vocab.stop_id)
    return ids


@dataclass
class DialogRound:
    question_ids: list[int]
    answer_ids: list[int]
    question: int  # questions-pool index
    answer: int  # answers-pool index
    answer_options: list[int]  # answers-pool indices
    gt_index: int
    question_options: list[int] | None = None  # follow-up candidates (questions-pool)
    question_gt_index: int | None = None
    question_provenance: list[str] | None = None


@dataclass
class DialogRecord:
    image_id: int
    caption: str
    caption_ids: list[int]
    rounds: list[DialogRound]


ROUNDS_PER_DIALOG = 10


class DialogDataset:
    """Loaded dialog corpus: string pools, their encodings, and dialog records."""

    def __init__(self, questions, answers, records, vocab, task="visdial", seed=None,
                 max_question_words=20, max_answer_words=20):
        self.questions: list[str] = questions
        self.answers: list[str] = answers
        self.records: list[DialogRecord] = records
        self.vocab = vocab
        self.task = task
        self.seed = seed
        self.question_ids = [
            encode_truncate(tokenize(q), vocab, max_question_words) for q in questions
        ]
        self.answer_ids = [
            encode_truncate(tokenize(a), vocab, max_answer_words) for a in answers
        ]

    def __len__(self) -> int:
        return len(self.records)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise LoadError(message)


def load_dataset(path, vocab: Vocabulary, max_question_words: int = 20,
                 max_answer_words: int = 20, max_caption_words: int = 40) -> DialogDataset:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    return dataset_from_payload(
        payload, vocab,
        max_question_words=max_question_words,
        max_answer_words=max_answer_words,
        max_caption_words=max_caption_words,
    )


def dataset_from_payload(payload, vocab: Vocabulary, max_question_words: int = 20,
                         max_answer_words: int = 20,
                         max_caption_words: int = 40) -> DialogDataset:
    _require(isinstance(payload, dict), "dataset root must be an object")
    for key in ("questions", "answers", "dialogs"):
        _require(key in payload, f"dataset is missing the {key!r} pool")
    questions = payload["questions"]
    answers = payload["answers"]
    _require(all(isinstance(q, str) for q in questions), "questions pool must hold strings")
    _require(all(isinstance(a, str) for a in answers), "answers pool must hold strings")
    task = payload.get("task", "visdial")
    _require(task in ("visdial", "visdial-q"), f"unknown task {task!r}")

    q_pool_ids = [encode_truncate(tokenize(q), vocab, max_question_words) for q in questions]
    a_pool_ids = [encode_truncate(tokenize(a), vocab, max_answer_words) for a in answers]

    records = []
    seen_images = set()
    for d, dialog in enumerate(payload["dialogs"]):
        where = f"dialog {d}"
        _require(isinstance(dialog, dict), f"{where}: must be an object")
        image_id = dialog.get("image_id")
        _require(isinstance(image_id, int), f"{where}: image_id must be an integer")
        where = f"dialog {d} (image_id {image_id})"
        _require(image_id not in seen_images, f"{where}: duplicate image_id")
        seen_images.add(image_id)
        caption = dialog.get("caption", "")
        rounds_raw = dialog.get("rounds", [])
        _require(
            len(rounds_raw) == ROUNDS_PER_DIALOG,
            f"{where}: expected {ROUNDS_PER_DIALOG} rounds, got {len(rounds_raw)}",
        )
        rounds = []
        for t, r in enumerate(rounds_raw, start=1):
            rwhere = f"{where} round {t}"
            qi, ai = r.get("question"), r.get("answer")
            _require(isinstance(qi, int) and 0 <= qi < len(questions),
                     f"{rwhere}: question index out of range")
            _require(isinstance(ai, int) and 0 <= ai < len(answers),
                     f"{rwhere}: answer index out of range")
            opts = r.get("answer_options", [])
            _require(len(set(opts)) == len(opts), f"{rwhere}: answer options not unique")
            _require(all(isinstance(o, int) and 0 <= o < len(answers) for o in opts),
                     f"{rwhere}: answer option index out of range")
            gt = r.get("gt_index")
            _require(isinstance(gt, int) and 0 <= gt < len(opts),
                     f"{rwhere}: gt_index out of range")
            _require(answers[opts[gt]] == answers[ai],
                     f"{rwhere}: gt option text differs from the round answer")
            q_opts = r.get("question_options")
            q_gt = r.get("question_gt_index")
            q_prov = r.get("question_provenance")
            if q_opts is not None:
                _require(len(set(q_opts)) == len(q_opts),
                         f"{rwhere}: question options not unique")
                _require(all(isinstance(o, int) and 0 <= o < len(questions) for o in q_opts),
                         f"{rwhere}: question option index out of range")
                _require(isinstance(q_gt, int) and 0 <= q_gt < len(q_opts),
                         f"{rwhere}: question_gt_index out of range")
                _require(t < ROUNDS_PER_DIALOG, f"{rwhere}: follow-up options on the last round")
                next_qi = rounds_raw[t].get("question")
                _require(questions[q_opts[q_gt]] == questions[next_qi],
                         f"{rwhere}: gt follow-up differs from the next round's question")
                if q_prov is not None:
                    _require(len(q_prov) == len(q_opts),
                             f"{rwhere}: provenance length mismatch")
                    _require(all(p in PROVENANCE_LABELS for p in q_prov),
                             f"{rwhere}: unknown provenance label")
                    _require(q_prov.count("correct") == 1,
                             f"{rwhere}: exactly one candidate must be labelled correct")
            rounds.append(DialogRound(
                question_ids=q_pool_ids[qi],
                answer_ids=a_pool_ids[ai],
                question=qi,
                answer=ai,
                answer_options=list(opts),
                gt_index=gt,
                question_options=list(q_opts) if q_opts is not None else None,
                question_gt_index=q_gt,
                question_provenance=list(q_prov) if q_prov is not None else None,
            ))
        records.append(DialogRecord(
            image_id=image_id,
            caption=caption,
            caption_ids=encode_truncate(tokenize(caption), vocab, max_caption_words),
            rounds=rounds,
        ))
    return DialogDataset(
        list(questions), list(answers), records, vocab,
        task=task, seed=payload.get("seed"),
        max_question_words=max_question_words, max_answer_words=max_answer_words,
    )


def corpus_from_payload(payload):
    """Token lists for vocabulary building: every caption, question and answer
    occurrence across the dialogs (pool entries count once per reference)."""
    questions = payload["questions"]
    answers = payload["answers"]
    for dialog in payload["dialogs"]:
        yield tokenize(dialog.get("caption", ""))
        for r in dialog["rounds"]:
            yield tokenize(questions[r["question"]])
            yield tokenize(answers[r["answer"]])


def dataset_json_bytes(payload) -> bytes:
    """Canonical serialization: key-sorted, compact, newline-terminated."""
    return (json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def write_dataset(path, payload) -> None:
    with open(path, "wb") as f:
        f.write(dataset_json_bytes(payload))


class GloveTable:
    """Word -> dense vector table; all vectors share one dimension."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise ValueError("word-vector table is empty")
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"word vectors disagree on dimension: {sorted(dims)}")
        self.dim = next(iter(dims))[0]
        self._vectors = {w: np.ascontiguousarray(v, dtype=np.float64)
                         for w, v in vectors.items()}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, word: str) -> bool:
        return word in self._vectors

    def get(self, word: str):
        return self._vectors.get(word)


def load_glove(path) -> GloveTable:
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            word = parts[0]
            if word in vectors:
                raise LoadError(f"word-vector file line {lineno}: duplicate word {word!r}")
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise LoadError(f"word-vector file line {lineno}: {exc}") from exc
            if vec.size == 0:
                raise LoadError(f"word-vector file line {lineno}: no components")
            vectors[word] = vec
    if not vectors:
        raise LoadError("word-vector file holds no vectors")
    try:
        return GloveTable(vectors)
    except ValueError as exc:
        raise LoadError(str(exc)) from exc


def write_glove(path, vectors: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for word, vec in vectors.items():
            f.write(word + " " + " ".join(repr(float(x)) for x in vec) + "\n")


FEATURE_MAGIC = b"IMGF"


class ImageFeatureStore:
    """image_id -> unit-l2-norm feature vector."""

    def __init__(self, features: dict[int, np.ndarray]):
        if not features:
            raise ValueError("feature store is empty")
        dims = {v.shape for v in features.values()}
        if len(dims) != 1:
            raise ValueError(f"feature vectors disagree on dimension: {sorted(dims)}")
        self.dim = next(iter(dims))[0]
        self._features = {}
        for image_id, vec in features.items():
            vec = np.ascontiguousarray(vec, dtype=np.float64)
            norm = float(np.linalg.norm(vec))
            if not np.isfinite(norm) or norm == 0.0:
                raise LoadError(f"image {image_id}: feature vector has zero or non-finite norm")
            self._features[image_id] = vec / norm

    def __len__(self) -> int:
        return len(self._features)

    def __contains__(self, image_id: int) -> bool:
        return image_id in self._features

    def ids(self) -> list[int]:
        return sorted(self._features)

    def get(self, image_id: int) -> np.ndarray:
        try:
            return self._features[image_id]
        except KeyError:
            raise LoadError(f"image {image_id}: no feature vector in store") from None


def load_features(path) -> ImageFeatureStore:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise LoadError(f"feature file magic mismatch: {magic!r}")
        header = f.read(8)
        if len(header) != 8:
            raise LoadError("feature file header truncated")
        count, dim = struct.unpack("<II", header)
        features: dict[int, np.ndarray] = {}
        row_bytes = 8 + 4 * dim
        for i in range(count):
            row = f.read(row_bytes)
            if len(row) != row_bytes:
                raise LoadError(f"feature row {i}: truncated")
            (image_id,) = struct.unpack("<q", row[:8])
            vec = np.frombuffer(row[8:], dtype="<f4").astype(np.float64)
            if image_id in features:
                raise LoadError(f"feature row {i}: duplicate image_id {image_id}")
            features[image_id] = vec
        if f.read(1):
            raise LoadError("feature file has trailing bytes")
    return ImageFeatureStore(features)


def write_features(path, features: dict[int, np.ndarray]) -> None:
    items = sorted(features.items())
    dims = {np.asarray(v).shape for _, v in items}
    if len(dims) != 1:
        raise ValueError("feature vectors disagree on dimension")
    dim = next(iter(dims))[0]
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", len(items), dim))
        for image_id, vec in items:
            f.write(struct.pack("<q", image_id))
            f.write(np.asarray(vec, dtype="<f4").tobytes())
