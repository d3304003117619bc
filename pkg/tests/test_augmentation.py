from __future__ import annotations

import re

import numpy as np
import pytest

from intentgate.augmentation import (
    AugmentationConfig,
    KeywordSpan,
    augment_dataset,
    content_tokens,
    corrupt,
    extract_keywords,
)
from intentgate.domain import Origin

from conftest import make_utterance

TRAIN_TEXTS = [
    "looking for a gaming laptop",
    "track my refund status please",
    "cancel my last grocery order",
    "best phone under twenty thousand",
    "update my delivery address today",
    "show me running shoes for men",
    "need help with a failed payment",
    "compare wireless headphones with mic",
    "apply discount coupon to my cart",
    "schedule installation for the new fridge",
]


def _span(sentence: str, text: str) -> KeywordSpan:
    start = sentence.index(text)
    return KeywordSpan(text=text, start=start, end=start + len(text), score=1.0)


def test_content_keywords_outrank_stopwords():
    spans = extract_keywords("looking for a gaming laptop")
    texts = [s.text for s in spans]
    assert any(t in ("gaming laptop", "laptop") for t in texts)
    assert all(t.lower() not in ("for", "a", "for a") for t in texts)


def test_all_stopword_sentence_has_no_keywords():
    assert extract_keywords("the of and a") == []


def test_single_content_token_is_its_own_keyword():
    assert [s.text for s in extract_keywords("refund")] == ["refund"]


def test_keyword_spans_are_nonoverlapping_substrings():
    sentence = "compare wireless headphones with mic and a carry case"
    spans = extract_keywords(sentence, max_k=5)
    for s in spans:
        assert sentence[s.start : s.end] == s.text
    ordered = sorted(spans, key=lambda s: s.start)
    for left, right in zip(ordered, ordered[1:]):
        assert left.end <= right.start
    scores = [s.score for s in spans]
    assert scores == sorted(scores, reverse=True)


def test_forced_removal_reproduces_the_known_conversion():
    sentence = "looking for a gaming laptop"
    rng = np.random.default_rng(0)
    out = corrupt(sentence, [_span(sentence, "gaming laptop")], rng, removal_prob=1.0)
    assert out == "looking for a"


def test_forced_replacement_swaps_the_span_for_one_token():
    sentence = "looking for a gaming laptop"
    rng = np.random.default_rng(0)
    out = corrupt(sentence, [_span(sentence, "gaming laptop")], rng, removal_prob=0.0)
    tokens = out.split()
    assert len(tokens) == len(sentence.split()) - 2 + 1
    assert tokens[:3] == ["looking", "for", "a"]
    assert re.fullmatch(r"[A-Z]{5}", tokens[3])


def test_removing_the_whole_sentence_retries_with_replacement():
    rng = np.random.default_rng(0)
    out = corrupt("refund", [_span("refund", "refund")], rng, removal_prob=1.0)
    assert re.fullmatch(r"[A-Z]{5}", out)


def test_corrupt_validates_spans():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        corrupt("hello world", [], rng)
    with pytest.raises(ValueError):
        corrupt("hello world", [KeywordSpan("nope", 0, 4, 1.0)], rng)


@pytest.mark.parametrize("size,expected", [(1, 1), (7, 1), (150, 30)])
def test_augmented_count_follows_the_ratio(size, expected):
    train = [make_utterance(TRAIN_TEXTS[i % len(TRAIN_TEXTS)] + f" variant {i}") for i in range(size)]
    out = augment_dataset(train, AugmentationConfig(ratio=0.2, seed=1))
    assert len(out) == expected


def test_augmented_rows_are_oos_and_marked():
    train = [make_utterance(t) for t in TRAIN_TEXTS]
    for utt in augment_dataset(train, AugmentationConfig(seed=5)):
        assert utt.gold_labels == frozenset()
        assert utt.origin == Origin.AUGMENTED


def test_same_seed_gives_identical_output():
    train = [make_utterance(t) for t in TRAIN_TEXTS]
    first = [u.text for u in augment_dataset(train, AugmentationConfig(seed=9))]
    second = [u.text for u in augment_dataset(train, AugmentationConfig(seed=9))]
    assert first == second


def test_outputs_keep_lexical_proximity_and_never_copy_train():
    train = [make_utterance(t) for t in TRAIN_TEXTS * 10]
    train_texts = {u.text for u in train}
    out = augment_dataset(train, AugmentationConfig(ratio=0.5, seed=3))
    assert len(out) == 50
    for utt in out:
        assert utt.text not in train_texts
        shares_token = any(content_tokens(utt.text) & content_tokens(t) for t in TRAIN_TEXTS)
        is_pure_removal = all(tok.islower() or not tok.isalpha() for tok in utt.text.split())
        assert shares_token or is_pure_removal, utt.text


def test_replacement_tokens_match_the_alphabet_and_length():
    train = [make_utterance(t) for t in TRAIN_TEXTS]
    for cfg in (AugmentationConfig(seed=2), AugmentationConfig(seed=2, replace_string_len=8)):
        for utt in augment_dataset(train, cfg):
            for token in utt.text.split():
                if token.isupper():
                    assert re.fullmatch(rf"[A-Z]{{{cfg.replace_string_len}}}", token)


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(ratio=0.0)
    with pytest.raises(ValueError):
        AugmentationConfig(replace_string_len=0)
    with pytest.raises(ValueError):
        AugmentationConfig(removal_prob=1.5)
    with pytest.raises(ValueError):
        augment_dataset([], AugmentationConfig())
