"""Embedding providers, cosine similarity, and the per-intent vector store.

The reference embedder hashes character 3-grams plus word unigrams into a
fixed-dimension signed feature space and L2-normalizes. It is pure: the
hash is keyed BLAKE2, so the same text gives bit-identical vectors on any
platform. Real sentence-transformer backends plug in through the same
provider interface; the store and retrieval never care which one produced
the vectors.

Store rows are (utterance, intent) pairs: a multi-label utterance appears
once under each of its intents. On disk a store is ``<name>.vecs``
(little-endian float64, row-major) plus ``<name>.idx.json`` carrying the
dim, per-intent row ranges, utterance ids, and texts.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .domain import Dataset

NORM_TOLERANCE = 1e-9

_TOKEN_RE = re.compile(r"[a-z0-9']+")


class EmbeddingError(Exception):
    pass


class DimensionMismatchError(EmbeddingError):
    pass


class ProviderUnavailableError(EmbeddingError):
    """Raised when a remote provider cannot be reached; never zero-filled."""


class EmbeddingProvider(Protocol):
    @property
    def dim(self) -> int: ...

    def embed(self, text: str) -> np.ndarray: ...

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


def normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise EmbeddingError("cannot normalize a zero or non-finite vector")
    return np.asarray(v, dtype=np.float64) / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; raises on dimension mismatch."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dim mismatch: {a.shape} vs {b.shape}")
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        raise EmbeddingError("cosine undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def _hash64(feature: str) -> int:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, person=b"igt-hash").digest()
    return int.from_bytes(digest, "little")


def hash_features(text: str) -> list[str]:
    """Word unigrams plus character 3-grams of the lowercased text."""
    lowered = " ".join(text.lower().split())
    features = [f"w:{tok}" for tok in _TOKEN_RE.findall(lowered)]
    padded = f" {lowered} "
    features += [f"c:{padded[i:i + 3]}" for i in range(len(padded) - 2)]
    return features


class HashingEmbedder:
    """Deterministic signed feature-hashing embedder (the reference provider)."""

    def __init__(self, dim: int = 256):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValueError("cannot embed empty text")
        v = np.zeros(self._dim, dtype=np.float64)
        for feature in hash_features(text):
            h = _hash64(feature)
            sign = 1.0 if (h >> 63) & 1 else -1.0
            v[h % self._dim] += sign
        return normalize(v)

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if texts else np.zeros((0, self._dim))


class StaticEmbeddingProvider:
    """Provider backed by a fixed text-to-vector map; vectors are normalized.

    Used to engineer exact geometries in tests and to replay cached
    embeddings. Unknown texts raise KeyError.
    """

    def __init__(self, mapping: dict[str, np.ndarray], dim: int):
        self._dim = dim
        self._mapping = {text: normalize(np.asarray(vec, dtype=np.float64)) for text, vec in mapping.items()}
        for text, vec in self._mapping.items():
            if vec.shape != (dim,):
                raise DimensionMismatchError(f"vector for {text!r} has shape {vec.shape}, want ({dim},)")

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, text: str) -> np.ndarray:
        return self._mapping[text]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if texts else np.zeros((0, self._dim))


class RemoteEmbeddingProvider:
    """HTTP provider: POST {"texts": [...]} -> {"vectors": [[...]]}."""

    def __init__(self, url: str, dim: int, timeout_s: float = 10.0, retries: int = 2):
        self.url = url
        self._dim = dim
        self.timeout_s = timeout_s
        self.retries = retries

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = httpx.post(self.url, json={"texts": list(texts)}, timeout=self.timeout_s)
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
                arr = np.asarray(vectors, dtype=np.float64)
                if arr.shape != (len(texts), self._dim):
                    raise ProviderUnavailableError(
                        f"provider returned shape {arr.shape}, want ({len(texts)}, {self._dim})"
                    )
                return np.stack([normalize(row) for row in arr]) if len(texts) else arr
            except ProviderUnavailableError:
                raise
            except Exception as exc:  # network / protocol failures retried, then surfaced
                last_error = exc
        raise ProviderUnavailableError(f"embedding provider at {self.url} failed: {last_error}")


@dataclass(frozen=True)
class StoreEntry:
    utterance_id: int
    text: str
    row: int


class VectorStore:
    """Immutable per-intent store of normalized training-utterance vectors."""

    def __init__(
        self,
        dim: int,
        vectors: np.ndarray,
        utterance_ids: list[int],
        texts: list[str],
        intent_ranges: dict[str, tuple[int, int]],
    ):
        if vectors.ndim != 2 or vectors.shape[1] != dim:
            raise DimensionMismatchError(f"vectors shape {vectors.shape} does not match dim {dim}")
        self.dim = dim
        self.vectors = vectors
        self.utterance_ids = utterance_ids
        self.texts = texts
        self.intent_ranges = intent_ranges

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def intent_ids(self) -> list[str]:
        return list(self.intent_ranges)

    def entries(self, intent_id: str) -> list[StoreEntry]:
        start, stop = self.intent_ranges.get(intent_id, (0, 0))
        return [
            StoreEntry(utterance_id=self.utterance_ids[row], text=self.texts[row], row=row)
            for row in range(start, stop)
        ]

    def rows(self, intent_id: str) -> np.ndarray:
        start, stop = self.intent_ranges.get(intent_id, (0, 0))
        return self.vectors[start:stop]

    def save(self, path_prefix: str | Path) -> None:
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.vecs").write_bytes(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())
        index = {
            "dim": self.dim,
            "intents": {intent: [start, stop] for intent, (start, stop) in self.intent_ranges.items()},
            "utterance_ids": self.utterance_ids,
            "texts": self.texts,
        }
        Path(f"{prefix}.idx.json").write_text(
            json.dumps(index, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path_prefix: str | Path) -> "VectorStore":
        prefix = Path(path_prefix)
        index = json.loads(Path(f"{prefix}.idx.json").read_text(encoding="utf-8"))
        dim = index["dim"]
        raw = Path(f"{prefix}.vecs").read_bytes()
        vectors = np.frombuffer(raw, dtype="<f8").reshape(-1, dim).astype(np.float64)
        return cls(
            dim=dim,
            vectors=vectors,
            utterance_ids=list(index["utterance_ids"]),
            texts=list(index["texts"]),
            intent_ranges={intent: (start, stop) for intent, (start, stop) in index["intents"].items()},
        )


def build_store(provider: EmbeddingProvider, dataset: Dataset) -> VectorStore:
    """Embed all labeled train utterances, grouped per intent.

    Entry count equals the sum of |gold_labels| over train utterances, so
    augmented OOS rows (empty labels) never enter the store.
    """
    by_intent: dict[str, list[int]] = {intent.id: [] for intent in dataset.intents}
    unique_texts: list[str] = []
    for utt_id, utt in enumerate(dataset.train):
        for label in utt.gold_labels:
            by_intent[label].append(utt_id)
        unique_texts.append(utt.text)

    embedded = provider.embed_batch(unique_texts) if unique_texts else np.zeros((0, provider.dim))

    rows: list[np.ndarray] = []
    utterance_ids: list[int] = []
    texts: list[str] = []
    intent_ranges: dict[str, tuple[int, int]] = {}
    for intent_id, utt_ids in by_intent.items():
        start = len(rows)
        for utt_id in sorted(utt_ids):
            rows.append(embedded[utt_id])
            utterance_ids.append(utt_id)
            texts.append(dataset.train[utt_id].text)
        intent_ranges[intent_id] = (start, len(rows))

    vectors = np.stack(rows) if rows else np.zeros((0, provider.dim))
    return VectorStore(
        dim=provider.dim,
        vectors=vectors,
        utterance_ids=utterance_ids,
        texts=texts,
        intent_ranges=intent_ranges,
    )
