import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semrode.textmodel import (
    UNK, CompatibilityError, DegenerateInputError, EmbeddingTable, Example, PooledClassifier, Vocabulary,
    load_dataset, tokenize,
)
from semrode.training import TrainConfig, accuracy, train

from conftest import make_table


@pytest.mark.parametrize("raw, expected", [
    ("A big, juicy role.", ["a", "big", "juicy", "role"]),
    ("", []),
    ("   \t ", []),
    ("Woods' Top Ranking", ["woods'", "top", "ranking"]),
    ("-- (wow) !!", ["wow"]),
    ("don't STOP", ["don't", "stop"]),
])
def test_tokenize(raw, expected):
    assert tokenize(raw) == expected


@settings(max_examples=200, deadline=None)
@given(st.text())
def test_tokenize_is_total_and_clean(raw):
    toks = tokenize(raw)
    assert all(t and t == t.lower() and not any(c.isspace() for c in t) for t in toks)
    if raw.strip() and any(c.isalnum() for c in raw):
        assert toks


def test_example_rejects_empty_text():
    with pytest.raises(DegenerateInputError):
        Example.from_raw(" ... ", 0)


def test_pooling(tiny_table):
    v = tiny_table.vectors
    good, movie = v[tiny_table.vocab.index("good")], v[tiny_table.vocab.index("movie")]
    assert np.array_equal(tiny_table.mean_vector(["good"]), good)
    assert np.allclose(tiny_table.mean_vector(["good", "movie"]), (good + movie) / 2, atol=1e-15)
    assert np.array_equal(tiny_table.mean_vector(["zzz", "qqq"]), np.zeros(3))
    with pytest.raises(DegenerateInputError):
        tiny_table.mean_vector([])


def test_features_match_straight_line_oracle(tiny_model, tiny_table):
    batch = [["the", "good", "movie"], ["awful"], ["unknown", "film"]]
    pooled = np.stack([np.mean([tiny_table.vectors[tiny_table.vocab.index(t)] for t in s], axis=0) for s in batch])
    expected = np.maximum(pooled @ tiny_model.W1.value + tiny_model.b1.value, 0.0)
    assert np.allclose(tiny_model.features(batch).value, expected, atol=1e-12, rtol=0)
    assert np.allclose(tiny_model.feature_values(batch), expected, atol=1e-12, rtol=0)
    assert tiny_model.features(batch).shape == (3, tiny_model.hidden)


def test_zero_and_identity_feature_layers():
    table = make_table({"a": [0.5, 1.0], "b": [2.0, 0.0]})
    model = PooledClassifier(table, n_classes=2, hidden=2, seed=0)
    model.W1.value = np.zeros((2, 2))
    assert np.array_equal(model.feature_values([["a", "b"]]), np.zeros((1, 2)))
    model.W1.value = np.eye(2)
    assert np.allclose(model.feature_values([["a", "b"]]), [[1.25, 0.5]])


def test_zero_head_gives_uniform_and_label_zero(tiny_model):
    tiny_model.W2.value = np.zeros_like(tiny_model.W2.value)
    label, probs = tiny_model.predict(["good", "movie"])
    assert label == 0 and np.allclose(probs, [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["good", "great", "bad", "awful", "movie", "film", "the", "oov"]),
                min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_prediction_properties(tokens, rnd):
    table = make_table({"good": [1.0, 0.2], "great": [0.9, 0.3], "bad": [-1.0, 0.2], "awful": [-0.9, 0.25],
                        "movie": [0.0, 1.0], "film": [0.05, 0.95], "the": [0.0, 0.1]})
    model = PooledClassifier(table, n_classes=3, hidden=4, seed=1)
    label, probs = model.predict(tokens)
    assert abs(probs.sum() - 1) <= 1e-9 and label == int(np.argmax(probs))
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    assert np.allclose(model.predict(shuffled)[1], probs, atol=1e-12)
    assert np.array_equal(model.predict(tokens)[1], probs)  # pure: no state carried between calls


def test_checkpoint_roundtrip(tmp_path, tiny_model, tiny_table):
    path = tmp_path / "ckpt.json"
    tiny_model.save(path)
    back = PooledClassifier.load(path, tiny_table)
    for p, q in zip(tiny_model.parameters(), back.parameters()):
        assert np.array_equal(p.value, q.value)
    other = make_table({"x": [1.0, 0.0, 0.0]})
    with pytest.raises(CompatibilityError):
        PooledClassifier.load(path, other)


def test_embedding_file_roundtrip_and_header(tmp_path, tiny_table):
    path = tmp_path / "emb.txt"
    tiny_table.save(path)
    assert path.read_text().splitlines()[0] == f"{len(tiny_table.vocab)} 3"
    back = EmbeddingTable.load(path)
    assert back.vocab.itos == tiny_table.vocab.itos and np.array_equal(back.vectors, tiny_table.vectors)
    raw = tmp_path / "raw.txt"
    raw.write_text("a 1 2\nb 3 4\n")
    t = EmbeddingTable.load(raw)
    assert t.vocab.itos == [UNK, "a", "b"] and t.dim == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("a 1 2\nb 3\n")
    with pytest.raises(ValueError, match="bad.txt:2"):
        EmbeddingTable.load(bad)


def test_dataset_loading(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("1\tA great film!\n\n0\tawful\n")
    assert load_dataset(path) == [Example(("a", "great", "film"), 1), Example(("awful",), 0)]
    path.write_text("1\t?!\n")
    with pytest.raises(ValueError, match="d.tsv:1"):
        load_dataset(path)


def test_vocabulary_digest_depends_on_order():
    assert Vocabulary(["a", "b"]).digest() != Vocabulary(["b", "a"]).digest()


def test_embeddings_frozen_through_training(tiny_table, tiny_data):
    before = tiny_table.vectors.copy()
    model = PooledClassifier(tiny_table, 2, hidden=6, seed=0)
    train(model, tiny_data, None, TrainConfig(objective="vanilla", epochs=5, batch_size=2))
    assert np.array_equal(model.embeddings.vectors, before)
    assert not model.embeddings.vectors.flags.writeable


def test_separable_set_reaches_full_train_accuracy():
    rng = np.random.default_rng(0)
    words = {f"w{i}": rng.normal(size=4) for i in range(20)}
    table = make_table({w: list(v) for w, v in words.items()})
    direction = rng.normal(size=4)
    data = []
    for _ in range(60):
        toks = tuple(rng.choice(list(words), size=3))
        score = float(np.mean([words[t] for t in toks], axis=0) @ direction)
        if abs(score) > 0.2:
            data.append(Example(toks, int(score > 0)))
    model = PooledClassifier(table, 2, hidden=16, seed=0)
    train(model, data, None, TrainConfig(objective="vanilla", epochs=300, batch_size=8, learning_rate=0.2))
    assert accuracy(model, data) == 1.0
