"""Negative data augmentation: corrupt keywords to synthesize OOS training rows.

Each augmented sentence is derived from a uniformly sampled training
sentence by, per identified keyword and independently, either deleting the
keyword span or replacing it with a fresh random uppercase token. The
outputs keep the lexical shape of in-scope sentences while carrying no
labels, which is what makes them useful as hard negatives.

Keyword scoring is embedding-based: candidate word n-grams (n in {1, 2})
are ranked by cosine similarity between the n-gram and the full sentence
under the reference embedder. Pure stopword candidates are never returned.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass

import numpy as np

from .domain import LabeledUtterance, Origin
from .embedding import HashingEmbedder, cosine

# Compact English stopword list; enough to keep function words out of keywords.
STOPWORDS = frozenset(
    """a an the and or but if then else of for in on at to from by with without
    is are was were be been being am do does did have has had will would can
    could shall should may might must this that these those it its he she they
    them his her their we us our you your i me my mine so as not no nor too
    very just about into over under again there here when where why how all
    any both each few more most other some such than own same s t don now
    """.split()
)

_TOKEN_RE = re.compile(r"\S+")
_ALPHABET = string.ascii_uppercase


@dataclass(frozen=True)
class KeywordSpan:
    text: str
    start: int
    end: int
    score: float

    def overlaps(self, other: "KeywordSpan") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class AugmentationConfig:
    ratio: float = 0.2
    replace_string_len: int = 5
    removal_prob: float = 0.5
    max_keywords: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("ratio must be in (0, 1]")
        if self.replace_string_len < 1:
            raise ValueError("replace_string_len must be >= 1")
        if not 0.0 <= self.removal_prob <= 1.0:
            raise ValueError("removal_prob must be in [0, 1]")


def _word_spans(sentence: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(sentence)]


def _is_stopword(token: str) -> bool:
    return token.lower().strip(string.punctuation) in STOPWORDS


def content_tokens(sentence: str) -> set[str]:
    """Lowercased non-stopword tokens of a sentence."""
    return {
        tok.lower().strip(string.punctuation)
        for tok, _, _ in _word_spans(sentence)
        if not _is_stopword(tok) and tok.strip(string.punctuation)
    }


def extract_keywords(
    sentence: str, max_k: int = 5, embedder: HashingEmbedder | None = None
) -> list[KeywordSpan]:
    """Rank non-overlapping word n-gram spans by similarity to the sentence.

    Candidates are unigrams and adjacent bigrams; a candidate made only of
    stopwords is dropped. Selection is greedy by score, skipping spans that
    overlap an already chosen one. A sentence of only stopwords yields [].
    """
    if not sentence.strip():
        raise ValueError("sentence must be non-empty")
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    embedder = embedder or HashingEmbedder()

    words = _word_spans(sentence)
    candidates: list[tuple[str, int, int]] = []
    for i, (tok, start, end) in enumerate(words):
        if not _is_stopword(tok):
            candidates.append((tok, start, end))
        if i + 1 < len(words):
            nxt, _, nxt_end = words[i + 1]
            if not (_is_stopword(tok) and _is_stopword(nxt)):
                candidates.append((sentence[start:nxt_end], start, nxt_end))
    if not candidates:
        return []

    sentence_vec = embedder.embed(sentence)
    scored = [
        KeywordSpan(text=text, start=start, end=end, score=cosine(embedder.embed(text), sentence_vec))
        for text, start, end in candidates
    ]
    # Greedy non-overlapping selection, highest score first; position breaks ties.
    scored.sort(key=lambda s: (-s.score, s.start, s.end))
    chosen: list[KeywordSpan] = []
    for span in scored:
        if len(chosen) >= max_k:
            break
        if not any(span.overlaps(c) for c in chosen):
            chosen.append(span)
    return chosen


def _random_token(rng: np.random.Generator, length: int) -> str:
    return "".join(_ALPHABET[rng.integers(0, len(_ALPHABET))] for _ in range(length))


def _apply(
    sentence: str,
    keywords: list[KeywordSpan],
    rng: np.random.Generator,
    removal_prob: float,
    replace_len: int,
) -> tuple[str, list[str]]:
    """One corruption pass; returns (text, per-keyword action list)."""
    actions = ["remove" if rng.random() < removal_prob else "replace" for _ in keywords]
    out = sentence
    for span, action in sorted(zip(keywords, actions), key=lambda p: -p[0].start):
        replacement = "" if action == "remove" else _random_token(rng, replace_len)
        out = out[: span.start] + replacement + out[span.end :]
    return " ".join(out.split()), actions


def corrupt(
    sentence: str,
    keywords: list[KeywordSpan],
    rng: np.random.Generator,
    removal_prob: float = 0.5,
    replace_string_len: int = 5,
) -> str:
    """Delete or randomize each keyword independently; never returns the input.

    Empty results (everything removed) retry in replacement-only mode, which
    always yields a non-empty string.
    """
    if not keywords:
        raise ValueError("keywords must be non-empty")
    for span in keywords:
        if sentence[span.start : span.end] != span.text:
            raise ValueError(f"span {span!r} does not match sentence")
    out, _ = _apply(sentence, keywords, rng, removal_prob, replace_string_len)
    if not out or out == sentence:
        out, _ = _apply(sentence, keywords, rng, removal_prob=0.0, replace_len=replace_string_len)
    return out


def _limit_coverage(sentence: str, spans: list[KeywordSpan]) -> list[KeywordSpan]:
    """Drop lowest-scoring spans until a content token survives (keep >= 1).

    Corrupting spans that blanket every content word would leave nothing of
    the source's lexical shape; capping the set keeps the outputs close to
    in-scope sentences while still corrupting each kept keyword
    independently.
    """
    content = content_tokens(sentence)
    kept = list(spans)  # extract_keywords returns score-descending order
    while len(kept) > 1:
        covered: set[str] = set()
        for span in kept:
            covered |= content_tokens(span.text)
        if content - covered:
            break
        kept.pop()
    return kept


def augment_dataset(
    train: list[LabeledUtterance] | tuple[LabeledUtterance, ...],
    cfg: AugmentationConfig,
    embedder: HashingEmbedder | None = None,
) -> list[LabeledUtterance]:
    """Generate round(ratio * |train|) augmented OOS utterances (at least one).

    Deterministic for a fixed seed. Every output either shares a content
    token with its source or is a pure keyword-removal of it, and never
    string-equals any training sentence; draws violating that are retried.
    """
    if not train:
        raise ValueError("train must be non-empty")
    embedder = embedder or HashingEmbedder()
    rng = np.random.default_rng(cfg.seed)
    # round half away from zero, floor of one sample
    n_out = max(1, int(np.floor(cfg.ratio * len(train) + 0.5)))
    train_texts = {u.text for u in train}

    keyword_cache: dict[int, list[KeywordSpan]] = {}

    def keywords_for(idx: int) -> list[KeywordSpan]:
        if idx not in keyword_cache:
            spans = extract_keywords(train[idx].text, max_k=cfg.max_keywords, embedder=embedder)
            if not spans:
                # all-stopword sentence: fall back to its longest token
                words = _word_spans(train[idx].text)
                if words:
                    tok, start, end = max(words, key=lambda w: len(w[0]))
                    spans = [KeywordSpan(text=tok, start=start, end=end, score=0.0)]
            keyword_cache[idx] = _limit_coverage(train[idx].text, spans)
        return keyword_cache[idx]

    def acceptable(source: str, out: str, actions: list[str]) -> bool:
        if not out or out in train_texts:
            return False
        if all(a == "remove" for a in actions):
            return True
        return bool(content_tokens(source) & content_tokens(out))

    outputs: list[LabeledUtterance] = []
    for _ in range(n_out):
        produced: str | None = None
        for _source_try in range(8):
            idx = int(rng.integers(0, len(train)))
            spans = keywords_for(idx)
            if not spans:
                continue
            source = train[idx].text
            for _draw_try in range(16):
                out, actions = _apply(source, spans, rng, cfg.removal_prob, cfg.replace_string_len)
                if not out:
                    out, actions = _apply(source, spans, rng, 0.0, cfg.replace_string_len)
                if acceptable(source, out, actions):
                    produced = out
                    break
            if produced is not None:
                break
        if produced is None:
            # degenerate corpus; emit a replacement-only corruption as-is
            idx = int(rng.integers(0, len(train)))
            spans = keywords_for(idx) or [KeywordSpan(train[idx].text, 0, len(train[idx].text), 0.0)]
            produced, _ = _apply(train[idx].text, spans, rng, 0.0, cfg.replace_string_len)
        outputs.append(LabeledUtterance(text=produced, gold_labels=frozenset(), origin=Origin.AUGMENTED))
    return outputs
