from __future__ import annotations

import numpy as np
import pytest

from intentgate.domain import Dataset, IntentLabel
from intentgate.embedding import (
    DimensionMismatchError,
    EmbeddingError,
    HashingEmbedder,
    ProviderUnavailableError,
    RemoteEmbeddingProvider,
    StaticEmbeddingProvider,
    VectorStore,
    build_store,
    cosine,
    normalize,
)

from conftest import make_utterance


@pytest.fixture(scope="module")
def embedder() -> HashingEmbedder:
    return HashingEmbedder()


def test_embed_is_deterministic(embedder):
    assert np.array_equal(embedder.embed("abc"), embedder.embed("abc"))


def test_embed_is_unit_norm(embedder):
    for text in ("a", "gaming laptop", "WHERE IS MY ORDER??", "x" * 500):
        assert abs(np.linalg.norm(embedder.embed(text)) - 1.0) < 1e-9


def test_shared_ngrams_raise_similarity(embedder):
    base = embedder.embed("gaming laptop")
    close = embedder.embed("gaming laptop deals")
    far = embedder.embed("track my refund")
    assert float(base @ close) > float(base @ far)


def test_embed_rejects_empty_text(embedder):
    with pytest.raises(ValueError):
        embedder.embed("   ")


def test_cosine_basics():
    v = normalize(np.array([0.3, -1.2, 0.5]))
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine(v, -v) == pytest.approx(-1.0)
    assert cosine(np.array([1.0, 0.0]), np.array([0.6, 0.8])) == pytest.approx(0.6)


def test_cosine_dim_mismatch():
    with pytest.raises(DimensionMismatchError):
        cosine(np.ones(3), np.ones(4))


def test_normalize_rejects_zero_vector():
    with pytest.raises(EmbeddingError):
        normalize(np.zeros(4))


def _single_label_dataset(texts_by_intent: dict[str, list[str]]) -> Dataset:
    intents = tuple(IntentLabel(id=i, display_name=i) for i in texts_by_intent)
    train = tuple(
        make_utterance(text, intent) for intent, texts in texts_by_intent.items() for text in texts
    )
    return Dataset(intents=intents, train=train, valid_in_scope=(), valid_oos=())


def test_store_has_one_entry_per_single_label_utterance(embedder):
    ds = _single_label_dataset({"a": ["first one", "second one"], "b": ["third one"]})
    store = build_store(embedder, ds)
    assert len(store) == 3


def test_multilabel_utterance_appears_under_each_intent(embedder):
    intents = (IntentLabel(id="a", display_name="A"), IntentLabel(id="b", display_name="B"))
    ds = Dataset(
        intents=intents,
        train=(make_utterance("both things at once", "a", "b"),),
        valid_in_scope=(),
        valid_oos=(),
    )
    store = build_store(embedder, ds)
    assert len(store) == 2
    assert [e.text for e in store.entries("a")] == ["both things at once"]
    assert [e.text for e in store.entries("b")] == ["both things at once"]


def test_empty_train_set_gives_empty_store(embedder):
    ds = Dataset(
        intents=(IntentLabel(id="a", display_name="A"),), train=(), valid_in_scope=(), valid_oos=()
    )
    store = build_store(embedder, ds)
    assert len(store) == 0
    assert store.entries("a") == []


def test_augmented_rows_never_enter_the_store(embedder, toy_dataset):
    from dataclasses import replace

    from intentgate.domain import Origin

    with_negatives = replace(
        toy_dataset,
        train=toy_dataset.train
        + (make_utterance("noise XKCDQ row", origin=Origin.AUGMENTED),),
    )
    assert len(build_store(embedder, with_negatives)) == len(build_store(embedder, toy_dataset))


def test_store_save_load_is_bit_exact(tmp_path, embedder, toy_dataset):
    store = build_store(embedder, toy_dataset)
    store.save(tmp_path / "store")
    loaded = VectorStore.load(tmp_path / "store")
    assert loaded.dim == store.dim
    assert np.array_equal(loaded.vectors, store.vectors)
    assert loaded.utterance_ids == store.utterance_ids
    assert loaded.texts == store.texts
    assert loaded.intent_ranges == store.intent_ranges


def test_store_similarities_match_per_pair_cosine(embedder, toy_dataset):
    store = build_store(embedder, toy_dataset)
    query = embedder.embed("was my order refunded")
    for intent_id in store.intent_ids:
        fast = store.rows(intent_id) @ query
        slow = [cosine(row, query) for row in store.rows(intent_id)]
        assert np.allclose(fast, slow, atol=1e-12)


def test_static_provider_normalizes_and_rejects_unknown():
    provider = StaticEmbeddingProvider({"hello": np.array([3.0, 4.0])}, dim=2)
    assert np.allclose(provider.embed("hello"), [0.6, 0.8])
    with pytest.raises(KeyError):
        provider.embed("unseen")


def test_remote_provider_surfaces_failure_instead_of_zero_vectors():
    provider = RemoteEmbeddingProvider("http://127.0.0.1:9/embed", dim=4, timeout_s=0.2, retries=0)
    with pytest.raises(ProviderUnavailableError):
        provider.embed("hello")
