from __future__ import annotations

import pytest

from intentgate.domain import Dataset, IntentLabel, LabeledUtterance, Origin


def make_utterance(text: str, *labels: str, origin: Origin = Origin.HUMAN) -> LabeledUtterance:
    return LabeledUtterance(text=text, gold_labels=frozenset(labels), origin=origin)


@pytest.fixture
def toy_dataset() -> Dataset:
    """Three retail intents with a handful of utterances each."""
    intents = (
        IntentLabel(id="billing", display_name="Billing"),
        IntentLabel(id="shipping", display_name="Shipping"),
        IntentLabel(id="returns", display_name="Returns"),
    )
    train = (
        make_utterance("why was my card charged twice", "billing"),
        make_utterance("question about my last invoice", "billing"),
        make_utterance("update my payment method", "billing"),
        make_utterance("where is my package right now", "shipping"),
        make_utterance("track my delivery status", "shipping"),
        make_utterance("how long does standard shipping take", "shipping"),
        make_utterance("i want to return my order", "returns"),
        make_utterance("start a refund for this item", "returns"),
        make_utterance("exchange this for a different size", "returns"),
        make_utterance("refund the shipping fee on my invoice", "billing", "returns"),
    )
    valid_in_scope = (
        make_utterance("charged the wrong amount on my bill", "billing"),
        make_utterance("my parcel has not arrived yet", "shipping"),
        make_utterance("send this back for a refund", "returns"),
    )
    valid_oos = (
        make_utterance("what is the weather like today"),
        make_utterance("tell me a good pasta recipe"),
    )
    return Dataset(intents=intents, train=train, valid_in_scope=valid_in_scope, valid_oos=valid_oos)
