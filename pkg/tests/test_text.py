import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dialogrank import text
from synth import memorize_family


def test_tokenize_punctuation():
    assert text.tokenize("Is it sunny?") == ["is", "it", "sunny", "?"]
    assert text.tokenize("What's that") == ["what", "'", "s", "that"]
    assert text.tokenize("") == []
    assert text.tokenize("Wait, really?! yes.") == [
        "wait", ",", "really", "?", "!", "yes", "."]


@given(st.lists(st.sampled_from(["cat", "dog", "?", "'", "sunny", "a1"]), max_size=12))
def test_tokenize_detokenize_idempotent(tokens):
    line = text.detokenize(tokens)
    assert text.tokenize(line) == tokens


def make_vocab(words=("cat", "dog", "sunny")):
    return text.Vocabulary(list(text.RESERVED_WORDS) + list(words))


def test_encode_truncate_truncates_and_stops():
    vocab = make_vocab([f"w{i}" for i in range(30)])
    words = [f"w{i}" for i in range(25)]
    ids = text.encode_truncate(words, vocab, 20)
    assert len(ids) == 21
    assert ids[-1] == vocab.stop_id
    assert vocab.stop_id not in ids[:-1]


def test_encode_truncate_empty_and_short():
    vocab = make_vocab()
    assert text.encode_truncate([], vocab, 20) == [vocab.stop_id]
    ids = text.encode_truncate(["cat", "dog", "sunny"], vocab, 20)
    assert len(ids) == 4
    assert vocab.unk_id not in ids


def test_encode_truncate_maps_oov_to_unk():
    vocab = make_vocab()
    ids = text.encode_truncate(["cat", "zebra"], vocab, 20)
    assert ids[1] == vocab.unk_id


def test_encode_truncate_rejects_bad_max_len():
    with pytest.raises(ValueError):
        text.encode_truncate(["cat"], make_vocab(), 0)


def test_build_vocab_ordering_and_threshold():
    corpus = [["a"], ["a"], ["b"]]
    vocab = text.build_vocab(corpus, min_count=1)
    assert len(vocab) == 5
    assert vocab.encode_word("a") < vocab.encode_word("b")

    vocab2 = text.build_vocab(corpus, min_count=2)
    assert "a" in vocab2 and "b" not in vocab2

    again = text.build_vocab(corpus, min_count=1)
    assert again == vocab


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError):
        text.build_vocab([])


def test_vocab_save_load_roundtrip(tmp_path):
    vocab = text.build_vocab([["sunny", "cat", "cat"]])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert text.Vocabulary.load(path) == vocab


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------


def minimal_payload():
    return {
        "format": text.DATASET_FORMAT,
        "task": "visdial",
        "questions": ["is it sunny ?", "is it big ?"],
        "answers": ["yes", "no", "maybe"],
        "dialogs": [{
            "image_id": 7,
            "caption": "a cat",
            "rounds": [
                {"question": t % 2, "answer": t % 3,
                 "answer_options": [t % 3, (t + 1) % 3], "gt_index": 0}
                for t in range(10)
            ],
        }],
    }


def test_load_dataset_roundtrip(tmp_path):
    payload = minimal_payload()
    path = tmp_path / "data.json"
    text.write_dataset(path, payload)
    vocab = text.build_vocab(text.corpus_from_payload(payload))
    ds = text.load_dataset(path, vocab)
    assert len(ds) == 1
    assert ds.records[0].image_id == 7
    assert len(ds.records[0].rounds) == 10
    # write -> read -> write is byte-identical
    blob1 = text.dataset_json_bytes(payload)
    blob2 = text.dataset_json_bytes(json.loads(blob1))
    assert blob1 == blob2


def test_load_dataset_rejects_nine_rounds():
    payload = minimal_payload()
    del payload["dialogs"][0]["rounds"][3]
    vocab = text.build_vocab(text.corpus_from_payload(payload))
    with pytest.raises(text.LoadError, match=r"dialog 0 .*expected 10 rounds, got 9"):
        text.dataset_from_payload(payload, vocab)


def test_load_dataset_rejects_duplicate_image():
    payload = minimal_payload()
    payload["dialogs"].append(json.loads(json.dumps(payload["dialogs"][0])))
    vocab = text.build_vocab(text.corpus_from_payload(payload))
    with pytest.raises(text.LoadError, match="duplicate image_id"):
        text.dataset_from_payload(payload, vocab)


def test_load_dataset_rejects_gt_text_mismatch():
    payload = minimal_payload()
    payload["dialogs"][0]["rounds"][0]["gt_index"] = 1  # points at a different answer
    vocab = text.build_vocab(text.corpus_from_payload(payload))
    with pytest.raises(text.LoadError, match="gt option text"):
        text.dataset_from_payload(payload, vocab)


def test_load_dataset_rejects_duplicate_options():
    payload = minimal_payload()
    payload["dialogs"][0]["rounds"][0]["answer_options"] = [0, 0]
    vocab = text.build_vocab(text.corpus_from_payload(payload))
    with pytest.raises(text.LoadError, match="not unique"):
        text.dataset_from_payload(payload, vocab)


def test_load_dataset_order_independent():
    payload, _ = memorize_family(n_dialogs=4)
    vocab = text.build_vocab(text.corpus_from_payload(payload))
    ds1 = text.dataset_from_payload(payload, vocab)
    payload["dialogs"] = payload["dialogs"][::-1]
    ds2 = text.dataset_from_payload(payload, vocab)
    by_id1 = {r.image_id: r for r in ds1.records}
    by_id2 = {r.image_id: r for r in ds2.records}
    assert set(by_id1) == set(by_id2)
    for image_id, rec in by_id1.items():
        other = by_id2[image_id]
        assert rec.caption_ids == other.caption_ids
        assert [r.question_ids for r in rec.rounds] == [r.question_ids for r in other.rounds]


def test_every_encoded_sequence_ends_in_stop():
    payload, _ = memorize_family(n_dialogs=3)
    vocab = text.build_vocab(text.corpus_from_payload(payload))
    ds = text.dataset_from_payload(payload, vocab)
    for seq in ds.question_ids + ds.answer_ids:
        assert seq[-1] == vocab.stop_id
        assert vocab.stop_id not in seq[:-1]


# ---------------------------------------------------------------------------
# word vectors and image features
# ---------------------------------------------------------------------------


def test_glove_roundtrip(tmp_path):
    vectors = {"cat": np.array([1.0, 2.0]), "dog": np.array([-0.5, 0.25])}
    path = tmp_path / "glove.txt"
    text.write_glove(path, vectors)
    table = text.load_glove(path)
    assert table.dim == 2
    assert np.array_equal(table.get("cat"), [1.0, 2.0])
    assert table.get("zebra") is None


def test_glove_rejects_ragged_dims(tmp_path):
    path = tmp_path / "glove.txt"
    path.write_text("cat 1.0 2.0\ndog 3.0\n")
    with pytest.raises(text.LoadError):
        text.load_glove(path)


def test_features_roundtrip_and_normalization(tmp_path):
    path = tmp_path / "feat.bin"
    text.write_features(path, {5: np.array([2.0, 0.0, 0.0]), 9: np.array([1.0, 1.0, 1.0])})
    store = text.load_features(path)
    assert store.dim == 3
    assert np.allclose(store.get(5), [1.0, 0.0, 0.0])
    assert abs(np.linalg.norm(store.get(9)) - 1.0) < 1e-6


def test_features_reject_zero_norm(tmp_path):
    path = tmp_path / "feat.bin"
    text.write_features(path, {5: np.zeros(3)})
    with pytest.raises(text.LoadError, match="image 5"):
        text.load_features(path)


def test_features_reject_bad_magic(tmp_path):
    path = tmp_path / "feat.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(text.LoadError, match="magic"):
        text.load_features(path)
