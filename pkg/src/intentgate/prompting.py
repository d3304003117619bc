"""Adaptive example retrieval, label masking, and prompt assembly/parsing.

Prompts are built from editable text templates with named placeholders.
Each intent gets one block (masked name as header, generated description,
retrieved examples in descending similarity order); block order follows the
mask's intent order and is identical for every prompt in a run. The model
is instructed to reason first and finish with a single machine-parseable
line, ``ANSWER: Label-xx[, Label-yy...]`` or ``ANSWER: OOS``.

Label names are masked to ``Label-<int>`` so the model cannot exploit
lexical hints in intent names. ``in_scope_only`` prompts contain no OOS
escape of any kind; the model must pick one of the listed labels.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .domain import IntentLabel
from .embedding import VectorStore
from .llm import ChatClient, ChatRequest

ANSWER_PREFIX = "ANSWER:"
OOS_TOKEN = "OOS"

_ANSWER_RE = re.compile(r"^\s*ANSWER:\s*(.+?)\s*$", re.MULTILINE)


class PromptError(Exception):
    pass


class UnmaskedIntentError(PromptError):
    pass


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 5
    t: float = 1e-5

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not -1.0 <= self.t <= 1.0:
            raise ValueError("t must be in [-1, 1]")


K_GRID = (0, 1, 5, 10, 20)
T_GRID = (1e-5, 0.3, 0.5, 0.7)


@dataclass(frozen=True)
class RetrievedExample:
    utterance_id: int
    text: str
    similarity: float


def retrieve_icl(
    query_vec: np.ndarray,
    store: VectorStore,
    cfg: RetrievalConfig,
) -> dict[str, list[RetrievedExample]]:
    """Per intent, the k most similar stored utterances with similarity > t.

    Sorted by similarity descending; exact ties break on utterance id
    ascending. k=0 yields empty lists everywhere.
    """
    query_vec = np.asarray(query_vec, dtype=np.float64)
    result: dict[str, list[RetrievedExample]] = {}
    for intent_id in store.intent_ids:
        if cfg.k == 0:
            result[intent_id] = []
            continue
        rows = store.rows(intent_id)
        entries = store.entries(intent_id)
        sims = rows @ query_vec if len(rows) else np.zeros(0)
        candidates = [
            RetrievedExample(utterance_id=e.utterance_id, text=e.text, similarity=float(s))
            for e, s in zip(entries, sims)
            if s > cfg.t
        ]
        candidates.sort(key=lambda r: (-r.similarity, r.utterance_id))
        result[intent_id] = candidates[: cfg.k]
    return result


@dataclass(frozen=True)
class LabelMask:
    """Bijection between intent ids and masked ``Label-<int>`` names."""

    intent_order: tuple[str, ...]
    to_masked: dict[str, str]
    seed: int

    def masked(self, intent_id: str) -> str:
        try:
            return self.to_masked[intent_id]
        except KeyError as exc:
            raise UnmaskedIntentError(f"intent {intent_id!r} is not masked") from exc

    def intent_for(self, masked_name: str) -> str | None:
        for intent_id, name in self.to_masked.items():
            if name == masked_name:
                return intent_id
        return None


def mask_labels(intents: list[IntentLabel] | tuple[IntentLabel, ...], seed: int) -> LabelMask:
    """Assign each intent a distinct random masked name, stable per seed."""
    if not intents:
        raise ValueError("intents must be non-empty")
    rng = np.random.default_rng(seed)
    numbers = rng.choice(10 * len(intents), size=len(intents), replace=False)
    to_masked = {intent.id: f"Label-{int(n)}" for intent, n in zip(intents, numbers)}
    return LabelMask(intent_order=tuple(i.id for i in intents), to_masked=to_masked, seed=seed)


# --- templates --------------------------------------------------------------


def _builtin_template(name: str) -> string.Template:
    text = (resources.files("intentgate") / "templates" / name).read_text(encoding="utf-8")
    return string.Template(text)


def load_template(name: str, template_dir: str | Path | None = None) -> string.Template:
    if template_dir is not None:
        path = Path(template_dir) / name
        if path.exists():
            return string.Template(path.read_text(encoding="utf-8"))
    return _builtin_template(name)


# --- descriptions -----------------------------------------------------------


class DescriptionStore:
    """File-backed cache of generated intent descriptions.

    Entries are keyed by intent id and carry the dataset hash they were
    generated from; a changed dataset invalidates the cached text.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, dict] = {}
        if self.path and self.path.exists():
            self._entries = json.loads(self.path.read_text(encoding="utf-8"))

    def get(self, intent_id: str, dataset_hash: str) -> str | None:
        entry = self._entries.get(intent_id)
        if entry and entry.get("dataset_hash") == dataset_hash:
            return entry["text"]
        return None

    def put(self, intent_id: str, text: str, generator_model: str, dataset_hash: str) -> None:
        self._entries[intent_id] = {
            "text": text,
            "generator_model": generator_model,
            "dataset_hash": dataset_hash,
        }
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(
                json.dumps(self._entries, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
            )

    def as_dict(self) -> dict[str, str]:
        return {intent_id: entry["text"] for intent_id, entry in self._entries.items()}


def generate_description(
    intent: IntentLabel,
    train_examples: list[str],
    client: ChatClient,
    store: DescriptionStore | None = None,
    dataset_hash: str = "",
    template_dir: str | Path | None = None,
    max_tokens: int = 256,
) -> str:
    """Produce (or fetch from cache) a one-paragraph description of an intent.

    LLM failures propagate; there is no silent fallback text.
    """
    if not train_examples:
        raise ValueError(f"intent {intent.id!r} has no training examples")
    if store is not None:
        cached = store.get(intent.id, dataset_hash)
        if cached is not None:
            return cached
    template = load_template("describe_intent.txt", template_dir)
    prompt = template.substitute(
        examples="\n".join(f"- {t}" for t in train_examples),
    )
    response = client.complete(ChatRequest(prompt=prompt, max_tokens=max_tokens))
    text = " ".join(response.text.split())
    if not text:
        raise PromptError(f"description generation for {intent.id!r} returned empty text")
    if store is not None:
        store.put(intent.id, text, client.model_name, dataset_hash)
    return text


# --- prompt assembly --------------------------------------------------------


@dataclass(frozen=True)
class PromptBundle:
    text: str
    mode: str  # "with_oos" | "in_scope_only"
    query: str
    block_order: tuple[str, ...]  # masked names in rendered order


def _label_block(masked_name: str, description: str, examples: list[RetrievedExample]) -> str:
    lines = [f"### {masked_name}", f"Description: {description}"]
    if examples:
        lines.append("Examples:")
        lines += [f"- {ex.text}" for ex in examples]
    return "\n".join(lines)


def build_prompt(
    query: str,
    retrieved: dict[str, list[RetrievedExample]],
    mask: LabelMask,
    descriptions: dict[str, str],
    mode: str = "with_oos",
    template_dir: str | Path | None = None,
) -> PromptBundle:
    """Render the full classification prompt.

    Blocks appear in the mask's intent order regardless of retrieval scores,
    and examples within a block keep their descending-similarity order.
    """
    if mode not in ("with_oos", "in_scope_only"):
        raise ValueError(f"unknown mode {mode!r}")
    for intent_id in retrieved:
        if intent_id not in mask.to_masked:
            raise UnmaskedIntentError(f"intent {intent_id!r} has no mask entry")

    blocks: list[str] = []
    order: list[str] = []
    for intent_id in mask.intent_order:
        masked_name = mask.masked(intent_id)
        blocks.append(
            _label_block(
                masked_name,
                descriptions.get(intent_id, "(no description available)"),
                retrieved.get(intent_id, []),
            )
        )
        order.append(masked_name)

    template_name = "intent_with_oos.txt" if mode == "with_oos" else "intent_in_scope_only.txt"
    template = load_template(template_name, template_dir)
    text = template.substitute(label_blocks="\n\n".join(blocks), query=query)
    return PromptBundle(text=text, mode=mode, query=query, block_order=tuple(order))


# --- response parsing -------------------------------------------------------


@dataclass(frozen=True)
class ParsedAnswer:
    kind: str  # "labels" | "oos" | "failure"
    labels: frozenset[str]
    ordered: tuple[str, ...] = ()  # answer-line order, for callers that take the first
    detail: str | None = None

    @property
    def is_failure(self) -> bool:
        return self.kind == "failure"


def parse_response(text: str, mask: LabelMask) -> ParsedAnswer:
    """Extract the final ANSWER line and unmask it; failures are values."""
    matches = _ANSWER_RE.findall(text)
    if not matches:
        return ParsedAnswer(kind="failure", labels=frozenset(), detail="no ANSWER line found")
    payload = matches[-1].strip()
    if payload.upper() == OOS_TOKEN:
        return ParsedAnswer(kind="oos", labels=frozenset())
    ordered: list[str] = []
    for part in payload.split(","):
        name = part.strip()
        if not name:
            continue
        intent_id = mask.intent_for(name)
        if intent_id is None:
            return ParsedAnswer(
                kind="failure", labels=frozenset(), detail=f"unknown masked label {name!r}"
            )
        if intent_id not in ordered:
            ordered.append(intent_id)
    if not ordered:
        return ParsedAnswer(kind="failure", labels=frozenset(), detail="empty answer payload")
    return ParsedAnswer(kind="labels", labels=frozenset(ordered), ordered=tuple(ordered))
