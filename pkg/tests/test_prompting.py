from __future__ import annotations

import re

import numpy as np
import pytest

from intentgate.domain import IntentLabel
from intentgate.embedding import HashingEmbedder, VectorStore, build_store, cosine
from intentgate.llm import ChatRequest, ChatResponse, EchoLlm
from intentgate.prompting import (
    DescriptionStore,
    RetrievalConfig,
    RetrievedExample,
    UnmaskedIntentError,
    build_prompt,
    generate_description,
    mask_labels,
    parse_response,
    retrieve_icl,
)

from conftest import make_utterance


def _random_store(rng: np.random.Generator, n_intents: int, n_vectors: int, dim: int = 8) -> VectorStore:
    vectors = rng.normal(size=(n_vectors, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    assignment = rng.integers(0, n_intents, size=n_vectors)
    order = np.argsort(assignment, kind="stable")
    ranges: dict[str, tuple[int, int]] = {}
    rows, ids, texts = [], [], []
    for intent in range(n_intents):
        start = len(rows)
        for pos in order:
            if assignment[pos] == intent:
                rows.append(vectors[pos])
                ids.append(int(pos))
                texts.append(f"utterance {pos}")
        ranges[f"intent_{intent}"] = (start, len(rows))
    return VectorStore(
        dim=dim,
        vectors=np.array(rows) if rows else np.zeros((0, dim)),
        utterance_ids=ids,
        texts=texts,
        intent_ranges=ranges,
    )


def _brute_force(query: np.ndarray, store: VectorStore, cfg: RetrievalConfig):
    out = {}
    for intent_id in store.intent_ids:
        scored = [
            (cosine(row, query), entry.utterance_id, entry.text)
            for row, entry in zip(store.rows(intent_id), store.entries(intent_id))
        ]
        kept = [s for s in scored if s[0] > cfg.t]
        kept.sort(key=lambda s: (-s[0], s[1]))
        out[intent_id] = [(uid, text) for _, uid, text in kept[: cfg.k]]
    return out


def test_k_zero_returns_empty_lists(toy_dataset):
    store = build_store(HashingEmbedder(), toy_dataset)
    query = HashingEmbedder().embed("refund please")
    result = retrieve_icl(query, store, RetrievalConfig(k=0, t=1e-5))
    assert all(v == [] for v in result.values())


def test_high_threshold_filters_everything(toy_dataset):
    store = build_store(HashingEmbedder(), toy_dataset)
    query = HashingEmbedder().embed("completely unrelated astronomy question")
    result = retrieve_icl(query, store, RetrievalConfig(k=5, t=0.99))
    assert all(v == [] for v in result.values())


def test_toy_store_matches_brute_force():
    rng = np.random.default_rng(0)
    store = _random_store(rng, n_intents=2, n_vectors=5)
    query = rng.normal(size=8)
    query /= np.linalg.norm(query)
    cfg = RetrievalConfig(k=2, t=1e-5)
    got = retrieve_icl(query, store, cfg)
    expected = _brute_force(query, store, cfg)
    for intent_id in store.intent_ids:
        assert [(r.utterance_id, r.text) for r in got[intent_id]] == expected[intent_id]


@pytest.mark.parametrize("k", [0, 1, 5])
@pytest.mark.parametrize("t", [1e-5, 0.3, 0.7])
def test_random_stores_match_brute_force(k, t):
    rng = np.random.default_rng(k * 100 + int(t * 10))
    for trial in range(10):
        store = _random_store(rng, n_intents=int(rng.integers(1, 5)), n_vectors=int(rng.integers(0, 40)))
        query = rng.normal(size=8)
        query /= np.linalg.norm(query)
        cfg = RetrievalConfig(k=k, t=t)
        got = retrieve_icl(query, store, cfg)
        expected = _brute_force(query, store, cfg)
        for intent_id in store.intent_ids:
            assert [(r.utterance_id, r.text) for r in got[intent_id]] == expected[intent_id]


def test_similarity_order_is_descending_within_intent(toy_dataset):
    store = build_store(HashingEmbedder(), toy_dataset)
    query = HashingEmbedder().embed("refund my invoice")
    result = retrieve_icl(query, store, RetrievalConfig(k=10, t=-1.0))
    for examples in result.values():
        sims = [e.similarity for e in examples]
        assert sims == sorted(sims, reverse=True)


# --- label masking -----------------------------------------------------------


def _intents(n: int) -> list[IntentLabel]:
    return [IntentLabel(id=f"intent_{i}", display_name=f"Intent {i}") for i in range(n)]


def test_single_intent_mask_shape():
    mask = mask_labels(_intents(1), seed=0)
    assert re.fullmatch(r"Label-\d+", mask.masked("intent_0"))


def test_fiftynine_intents_get_distinct_names_in_range():
    mask = mask_labels(_intents(59), seed=1)
    names = [mask.masked(f"intent_{i}") for i in range(59)]
    assert len(set(names)) == 59
    for name in names:
        assert 0 <= int(name.split("-")[1]) < 590


def test_mask_is_stable_per_seed():
    a = mask_labels(_intents(8), seed=42)
    b = mask_labels(_intents(8), seed=42)
    c = mask_labels(_intents(8), seed=43)
    assert a.to_masked == b.to_masked
    assert a.to_masked != c.to_masked


def test_mask_roundtrip():
    mask = mask_labels(_intents(5), seed=3)
    for intent_id in mask.intent_order:
        assert mask.intent_for(mask.masked(intent_id)) == intent_id
    assert mask.intent_for("Label-99999") is None


# --- prompt assembly ----------------------------------------------------------


def _descriptions(mask) -> dict[str, str]:
    return {i: f"description of {i}" for i in mask.intent_order}


def test_description_only_prompt_with_k_zero():
    mask = mask_labels(_intents(2), seed=0)
    bundle = build_prompt("hello", {i: [] for i in mask.intent_order}, mask, _descriptions(mask))
    assert bundle.text.count("### ") == 2
    assert "Examples:" not in bundle.text
    assert "Query: hello" in bundle.text


def test_in_scope_only_mode_has_no_oos_escape():
    mask = mask_labels(_intents(3), seed=0)
    bundle = build_prompt("hi", {}, mask, _descriptions(mask), mode="in_scope_only")
    assert "OOS" not in bundle.text
    assert "predict one of the in-scope labels" in bundle.text


def test_with_oos_mode_has_the_escape_line():
    mask = mask_labels(_intents(3), seed=0)
    bundle = build_prompt("hi", {}, mask, _descriptions(mask), mode="with_oos")
    assert "ANSWER: OOS" in bundle.text


def test_each_masked_name_is_exactly_one_block_header():
    mask = mask_labels(_intents(6), seed=5)
    bundle = build_prompt("check", {}, mask, _descriptions(mask))
    for intent_id in mask.intent_order:
        name = mask.masked(intent_id)
        assert len(re.findall(rf"^### {re.escape(name)}$", bundle.text, re.MULTILINE)) == 1


def test_block_order_follows_mask_order_not_scores():
    mask = mask_labels(_intents(3), seed=1)
    retrieved = {
        "intent_2": [RetrievedExample(0, "high score example", 0.99)],
        "intent_0": [RetrievedExample(1, "low score example", 0.01)],
    }
    bundle = build_prompt("q", retrieved, mask, _descriptions(mask))
    assert bundle.block_order == tuple(mask.masked(i) for i in mask.intent_order)
    positions = [bundle.text.index(f"### {name}") for name in bundle.block_order]
    assert positions == sorted(positions)


def test_examples_render_in_given_order():
    mask = mask_labels(_intents(1), seed=0)
    retrieved = {"intent_0": [RetrievedExample(0, "closest", 0.9), RetrievedExample(1, "second", 0.5)]}
    text = build_prompt("q", retrieved, mask, _descriptions(mask)).text
    assert text.index("- closest") < text.index("- second")


def test_unmasked_intent_is_an_error():
    mask = mask_labels(_intents(1), seed=0)
    with pytest.raises(UnmaskedIntentError):
        build_prompt("q", {"other_intent": []}, mask, {})


def test_prompt_is_deterministic():
    mask = mask_labels(_intents(4), seed=9)
    args = ("the query", {i: [] for i in mask.intent_order}, mask, _descriptions(mask))
    assert build_prompt(*args).text == build_prompt(*args).text


# --- parsing ------------------------------------------------------------------


def test_parse_single_label():
    mask = mask_labels([IntentLabel(id="faq_emi", display_name="EMI")], seed=0)
    name = mask.masked("faq_emi")
    parsed = parse_response(f"thinking...\nANSWER: {name}", mask)
    assert parsed.labels == frozenset({"faq_emi"})


def test_parse_oos():
    mask = mask_labels(_intents(2), seed=0)
    parsed = parse_response("reasoning text\nANSWER: OOS", mask)
    assert parsed.kind == "oos" and parsed.labels == frozenset()


def test_parse_multi_label_keeps_order():
    mask = mask_labels(_intents(3), seed=0)
    line = f"ANSWER: {mask.masked('intent_1')}, {mask.masked('intent_0')}"
    parsed = parse_response(line, mask)
    assert parsed.labels == frozenset({"intent_0", "intent_1"})
    assert parsed.ordered == ("intent_1", "intent_0")


def test_parse_uses_the_last_answer_line():
    mask = mask_labels(_intents(2), seed=0)
    text = f"ANSWER: {mask.masked('intent_0')}\nmore thoughts\nANSWER: {mask.masked('intent_1')}"
    assert parse_response(text, mask).labels == frozenset({"intent_1"})


def test_unknown_masked_name_is_a_failure_value():
    mask = mask_labels(_intents(2), seed=0)
    parsed = parse_response("ANSWER: Label-424242", mask)
    assert parsed.is_failure
    assert "Label-424242" in parsed.detail


def test_missing_answer_line_is_a_failure_value():
    mask = mask_labels(_intents(2), seed=0)
    assert parse_response("no final line here", mask).is_failure


def test_all_legal_answer_lines_roundtrip_through_built_prompts():
    rng = np.random.default_rng(12)
    for trial in range(10):
        n = int(rng.integers(1, 7))
        mask = mask_labels(_intents(n), seed=trial)
        bundle = build_prompt("probe", {}, mask, _descriptions(mask), mode="with_oos")
        legal = [[mask.masked(i)] for i in mask.intent_order]
        if n >= 2:
            legal.append([mask.masked(mask.intent_order[0]), mask.masked(mask.intent_order[1])])
        for names in legal:
            reply = bundle.text + "\nANSWER: " + ", ".join(names)
            parsed = parse_response(reply, mask)
            assert parsed.labels == frozenset(mask.intent_for(n_) for n_ in names)
        assert parse_response(bundle.text + "\nANSWER: OOS", mask).kind == "oos"


# --- descriptions -------------------------------------------------------------


class CountingEcho(EchoLlm):
    def __init__(self):
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        return super().complete(request)


def test_description_contains_example_text_with_echo_client():
    intent = IntentLabel(id="billing", display_name="Billing")
    client = EchoLlm()
    text = generate_description(intent, ["why was my card charged twice"], client)
    assert "card charged twice" in text
    assert "\n" not in text  # single paragraph


def test_description_cache_avoids_second_call(tmp_path):
    store = DescriptionStore(tmp_path / "descriptions.json")
    intent = IntentLabel(id="billing", display_name="Billing")
    client = CountingEcho()
    first = generate_description(intent, ["example one"], client, store=store, dataset_hash="h1")
    assert client.calls == 1
    second = generate_description(intent, ["example one"], client, store=store, dataset_hash="h1")
    assert client.calls == 1
    assert first == second
    # a changed dataset hash invalidates the entry
    generate_description(intent, ["example one"], client, store=store, dataset_hash="h2")
    assert client.calls == 2


def test_description_requires_examples():
    with pytest.raises(ValueError):
        generate_description(IntentLabel(id="x", display_name="X"), [], EchoLlm())


def test_description_store_persists(tmp_path):
    path = tmp_path / "descriptions.json"
    DescriptionStore(path).put("a", "text a", "echo", "h")
    assert DescriptionStore(path).get("a", "h") == "text a"
    assert DescriptionStore(path).get("a", "other") is None
