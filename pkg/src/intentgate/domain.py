"""Core data model: intents, utterances, datasets, and routed predictions.

All values are immutable after construction and safe to share across
threads. Out-of-scope (OOS) is represented as an empty gold-label set,
never as a reserved label id; only the evaluation layer introduces an
"OOS" pseudo-label when counting.

Dataset files are JSON Lines, one object per utterance:

    {"text": str, "labels": [str], "split": "train"|"valid", "origin": ...}

with intents in a sibling JSON array of ``{"id", "display_name",
"description"}`` objects. Serialization is canonical (fixed key order,
sorted labels) so serialize(deserialize(x)) round-trips byte-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

VALID_ORIGINS = ("human", "augmented", "paraphrase")


class Origin(str, Enum):
    HUMAN = "human"
    AUGMENTED = "augmented"
    PARAPHRASE = "paraphrase"


class Source(str, Enum):
    """Where a routed prediction came from."""

    CLASSIFIER = "classifier"
    LLM = "llm"
    TWO_STEP = "two_step"


@dataclass(frozen=True)
class IntentLabel:
    id: str
    display_name: str
    description: str | None = None


@dataclass(frozen=True)
class LabeledUtterance:
    text: str
    gold_labels: frozenset[str]
    origin: Origin = Origin.HUMAN

    @property
    def is_oos(self) -> bool:
        return not self.gold_labels


@dataclass(frozen=True)
class Dataset:
    intents: tuple[IntentLabel, ...]
    train: tuple[LabeledUtterance, ...]
    valid_in_scope: tuple[LabeledUtterance, ...]
    valid_oos: tuple[LabeledUtterance, ...]

    @property
    def intent_ids(self) -> list[str]:
        return [i.id for i in self.intents]

    def intent_by_id(self, intent_id: str) -> IntentLabel:
        for intent in self.intents:
            if intent.id == intent_id:
                return intent
        raise KeyError(intent_id)


@dataclass(frozen=True)
class LatencyBreakdown:
    classifier_ms: float
    llm_ms: float
    total_ms: float

    def as_dict(self) -> dict[str, float]:
        return {
            "classifier_ms": self.classifier_ms,
            "llm_ms": self.llm_ms,
            "total_ms": self.total_ms,
        }


@dataclass(frozen=True)
class RoutedPrediction:
    labels: frozenset[str]
    source: Source
    scores: dict[str, float]
    uncertainty: str  # "certain" | "uncertain" | "unstable"
    latency: LatencyBreakdown
    llm_error: str | None = None  # set when an LLM failure fell back to the classifier

    @property
    def is_oos(self) -> bool:
        return not self.labels


@dataclass(frozen=True)
class Violation:
    """One dataset invariant failure, naming the offending record."""

    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.location}: {self.message}"


def validate_dataset(dataset: Dataset) -> list[Violation]:
    """Check every dataset invariant; an empty list means the dataset is valid."""
    violations: list[Violation] = []
    seen_ids: set[str] = set()
    for i, intent in enumerate(dataset.intents):
        loc = f"intents[{i}]"
        if not intent.id:
            violations.append(Violation(loc, "intent id is empty"))
        elif intent.id in seen_ids:
            violations.append(Violation(loc, f"duplicate intent id {intent.id!r}"))
        seen_ids.add(intent.id)

    known = {i.id for i in dataset.intents}

    def check_utterance(loc: str, utt: LabeledUtterance, *, allow_labels: bool) -> None:
        if not utt.text.strip():
            violations.append(Violation(loc, "text is empty after trimming"))
        if utt.origin == Origin.AUGMENTED and utt.gold_labels:
            violations.append(
                Violation(loc, f"augmented utterance carries gold labels (text={utt.text!r})")
            )
        if not allow_labels and utt.gold_labels:
            violations.append(
                Violation(loc, f"OOS utterance carries gold labels (text={utt.text!r})")
            )
        for label in sorted(utt.gold_labels):
            if label not in known:
                violations.append(
                    Violation(loc, f"unknown label {label!r} (text={utt.text!r})")
                )

    for i, utt in enumerate(dataset.train):
        check_utterance(f"train[{i}]", utt, allow_labels=True)
    for i, utt in enumerate(dataset.valid_in_scope):
        check_utterance(f"valid_in_scope[{i}]", utt, allow_labels=True)
    for i, utt in enumerate(dataset.valid_oos):
        check_utterance(f"valid_oos[{i}]", utt, allow_labels=False)
    return violations


# --- serialization ---------------------------------------------------------


def _utterance_to_obj(utt: LabeledUtterance, split: str) -> dict:
    return {
        "text": utt.text,
        "labels": sorted(utt.gold_labels),
        "split": split,
        "origin": utt.origin.value,
    }


def _utterance_line(utt: LabeledUtterance, split: str) -> str:
    return json.dumps(_utterance_to_obj(utt, split), ensure_ascii=False, separators=(", ", ": "))


def serialize_utterances(dataset: Dataset) -> str:
    """Canonical JSONL for all utterances: train rows first, then valid rows."""
    lines = [_utterance_line(u, "train") for u in dataset.train]
    lines += [_utterance_line(u, "valid") for u in dataset.valid_in_scope]
    lines += [_utterance_line(u, "valid") for u in dataset.valid_oos]
    return "".join(line + "\n" for line in lines)


def serialize_intents(intents: Iterable[IntentLabel]) -> str:
    objs = [
        {"id": i.id, "display_name": i.display_name, "description": i.description}
        for i in intents
    ]
    return json.dumps(objs, ensure_ascii=False, indent=2) + "\n"


def _parse_utterance(obj: dict, lineno: int) -> tuple[LabeledUtterance, str]:
    try:
        text = obj["text"]
        labels = obj["labels"]
        split = obj["split"]
    except KeyError as exc:
        raise ValueError(f"line {lineno}: missing field {exc}") from exc
    origin = obj.get("origin", "human")
    if origin not in VALID_ORIGINS:
        raise ValueError(f"line {lineno}: unknown origin {origin!r}")
    if split not in ("train", "valid"):
        raise ValueError(f"line {lineno}: unknown split {split!r}")
    return LabeledUtterance(text=text, gold_labels=frozenset(labels), origin=Origin(origin)), split


def deserialize_dataset(utterances_jsonl: str, intents_json: str) -> Dataset:
    intents = tuple(
        IntentLabel(id=o["id"], display_name=o.get("display_name", o["id"]), description=o.get("description"))
        for o in json.loads(intents_json)
    )
    train: list[LabeledUtterance] = []
    valid_in: list[LabeledUtterance] = []
    valid_oos: list[LabeledUtterance] = []
    for lineno, line in enumerate(utterances_jsonl.splitlines(), start=1):
        if not line.strip():
            continue
        utt, split = _parse_utterance(json.loads(line), lineno)
        if split == "train":
            train.append(utt)
        elif utt.gold_labels:
            valid_in.append(utt)
        else:
            valid_oos.append(utt)
    return Dataset(intents=intents, train=tuple(train), valid_in_scope=tuple(valid_in), valid_oos=tuple(valid_oos))


def save_dataset(dataset: Dataset, utterances_path: str | Path, intents_path: str | Path) -> None:
    Path(utterances_path).write_text(serialize_utterances(dataset), encoding="utf-8")
    Path(intents_path).write_text(serialize_intents(dataset.intents), encoding="utf-8")


def load_dataset(utterances_path: str | Path, intents_path: str | Path) -> Dataset:
    return deserialize_dataset(
        Path(utterances_path).read_text(encoding="utf-8"),
        Path(intents_path).read_text(encoding="utf-8"),
    )


def dataset_hash(dataset: Dataset) -> str:
    """Stable content hash used to key caches derived from a dataset."""
    payload = serialize_intents(dataset.intents) + serialize_utterances(dataset)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
