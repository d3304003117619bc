"""Chat-LLM and representation-provider abstractions plus deterministic mocks.

Real backends sit behind a single wire shape (POST ``{"prompt", "max_tokens",
"temperature"}`` -> ``{"text"}`` for chat; POST ``{"text"}`` ->
``{"vector"}`` for hidden-state extraction), with vendor adapters expected
to live behind that shape. The mocks are seeded and fully deterministic so
every test runs without external models.

Every call carries a request id and a measured latency; an optional JSONL
log records them together with a hash of the prompt (never the prompt
itself).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .embedding import HashingEmbedder, normalize

_QUERY_RE = re.compile(r"^Query:\s*(.*)$", re.MULTILINE)


class LlmError(Exception):
    pass


class LlmTimeoutError(LlmError):
    pass


class LlmTransportError(LlmError):
    pass


class LlmProtocolError(LlmError):
    """Upstream replied, but not with the expected payload."""


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    max_tokens: int = 1024
    temperature: float = 0.0  # default 0 for reproducibility

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    latency_ms: float
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class ChatClient(Protocol):
    @property
    def model_name(self) -> str: ...

    def complete(self, request: ChatRequest) -> ChatResponse: ...


class RequestLog:
    """Append-only JSONL ledger of outbound calls (request id, prompt hash, latency)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, model: str, prompt: str, latency_ms: float, request_id: str) -> None:
        entry = {
            "request_id": request_id,
            "model": model,
            "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            "latency_ms": latency_ms,
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")


class HttpChatClient:
    """Chat client for any backend speaking the plain prompt/text JSON shape."""

    def __init__(
        self,
        url: str,
        model_name: str = "remote",
        auth_token: str | None = None,
        timeout_s: float = 30.0,
        retries: int = 1,
        log: RequestLog | None = None,
    ):
        self.url = url
        self._model_name = model_name
        self.auth_token = auth_token
        self.timeout_s = timeout_s
        self.retries = retries
        self.log = log

    @classmethod
    def from_env(cls, **kwargs) -> "HttpChatClient":
        url = os.environ.get("INTENTGATE_LLM_URL")
        if not url:
            raise LlmError("INTENTGATE_LLM_URL is not set")
        return cls(url=url, auth_token=os.environ.get("INTENTGATE_LLM_TOKEN"), **kwargs)

    @property
    def model_name(self) -> str:
        return self._model_name

    def complete(self, request: ChatRequest) -> ChatResponse:
        import httpx

        headers = {}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        payload = {
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        request_id = str(uuid.uuid4())
        start = time.perf_counter()
        last_error: LlmError | None = None
        for _ in range(self.retries + 1):
            try:
                resp = httpx.post(self.url, json=payload, headers=headers, timeout=self.timeout_s)
            except httpx.TimeoutException as exc:
                last_error = LlmTimeoutError(f"timeout after {self.timeout_s}s: {exc}")
                continue
            except httpx.TransportError as exc:
                last_error = LlmTransportError(str(exc))
                continue
            latency_ms = (time.perf_counter() - start) * 1000.0
            if resp.status_code != 200:
                raise LlmProtocolError(f"upstream returned HTTP {resp.status_code}")
            try:
                text = resp.json()["text"]
            except (KeyError, ValueError) as exc:
                raise LlmProtocolError(f"malformed upstream payload: {exc}") from exc
            if self.log:
                self.log.append(self._model_name, request.prompt, latency_ms, request_id)
            return ChatResponse(text=text, latency_ms=latency_ms)
        assert last_error is not None
        raise last_error


def _extract_query(prompt: str) -> str | None:
    matches = _QUERY_RE.findall(prompt)
    return matches[-1].strip() if matches else None


class MockLlm:
    """Deterministic oracle-backed chat double emitting valid ANSWER lines.

    The oracle maps utterance text to its gold intent-id set (empty set
    means OOS). Masked names come from the label mask the prompts use.
    With error_rate 0 the mock is a perfect oracle; error_rate flips
    in-scope answers to a uniformly wrong label, and oos_miss_rate makes
    gold-OOS queries answer some in-scope label instead. Prompts without an
    OOS escape never get an OOS answer.
    """

    def __init__(
        self,
        oracle: dict[str, frozenset[str] | set[str]],
        mask,  # prompting.LabelMask; untyped to avoid an import cycle
        error_rate: float = 0.0,
        oos_miss_rate: float = 0.0,
        seed: int = 0,
        delay_ms: float = 0.0,
        log: RequestLog | None = None,
    ):
        if not 0.0 <= error_rate <= 1.0:
            raise ValueError("error_rate must be in [0, 1]")
        self.oracle = {text: frozenset(labels) for text, labels in oracle.items()}
        self.mask = mask
        self.error_rate = error_rate
        self.oos_miss_rate = oos_miss_rate
        self.delay_ms = delay_ms
        self.log = log
        self._rng = np.random.default_rng(seed)

    @property
    def model_name(self) -> str:
        return "mock-oracle"

    def _pick(self, names: Sequence[str]) -> str:
        return names[int(self._rng.integers(0, len(names)))]

    def complete(self, request: ChatRequest) -> ChatResponse:
        start = time.perf_counter()
        if self.delay_ms:
            time.sleep(self.delay_ms / 1000.0)
        query = _extract_query(request.prompt)
        allows_oos = "OOS" in request.prompt
        all_masked = [self.mask.masked(i) for i in self.mask.intent_order]
        gold = self.oracle.get(query, frozenset()) if query is not None else frozenset()
        gold_masked = sorted(self.mask.masked(g) for g in gold)

        if gold_masked:
            wrong = [n for n in all_masked if n not in gold_masked]
            if wrong and self._rng.random() < self.error_rate:
                answer = self._pick(wrong)
            else:
                answer = ", ".join(gold_masked)
        elif allows_oos:
            if self.oos_miss_rate and self._rng.random() < self.oos_miss_rate:
                answer = self._pick(all_masked)
            else:
                answer = "OOS"
        else:
            answer = self._pick(all_masked)

        text = f"The query is about one topic; matching it against each label.\nANSWER: {answer}"
        latency_ms = (time.perf_counter() - start) * 1000.0
        if self.log:
            self.log.append(self.model_name, request.prompt, latency_ms, str(uuid.uuid4()))
        return ChatResponse(
            text=text,
            latency_ms=latency_ms,
            prompt_tokens=len(request.prompt.split()),
            completion_tokens=len(text.split()),
        )


class EchoLlm:
    """Chat double that echoes the prompt back; used by description tests."""

    model_name = "echo"

    def complete(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(text=request.prompt, latency_ms=0.0)


# --- internal-representation providers --------------------------------------


class RepresentationProvider(Protocol):
    @property
    def dim(self) -> int: ...

    def represent(self, text: str) -> np.ndarray: ...


class HashingRepresentationProvider:
    """Deterministic stand-in for decoder hidden-state extraction."""

    provider_id = "hashing-repr"

    def __init__(self, dim: int = 256):
        self._embedder = HashingEmbedder(dim)

    @property
    def dim(self) -> int:
        return self._embedder.dim

    def represent(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValueError("text must be non-empty")
        return self._embedder.embed(text)


class MappedRepresentationProvider:
    """Fixed text-to-vector map; lets tests construct exact geometries.

    key_fn, when given, transforms the incoming (possibly template-wrapped)
    text into the lookup key.
    """

    provider_id = "mapped-repr"

    def __init__(
        self,
        mapping: dict[str, np.ndarray],
        dim: int,
        key_fn: Callable[[str], str] | None = None,
    ):
        self._dim = dim
        self._mapping = {k: normalize(np.asarray(v, dtype=np.float64)) for k, v in mapping.items()}
        self._key_fn = key_fn or (lambda s: s)

    @property
    def dim(self) -> int:
        return self._dim

    def represent(self, text: str) -> np.ndarray:
        return self._mapping[self._key_fn(text)]


class HttpRepresentationProvider:
    """Self-hosted hidden-state endpoint: POST {"text": str} -> {"vector": [...]}."""

    def __init__(self, url: str, dim: int, provider_id: str = "remote-repr", timeout_s: float = 30.0):
        self.url = url
        self._dim = dim
        self.provider_id = provider_id
        self.timeout_s = timeout_s

    @property
    def dim(self) -> int:
        return self._dim

    def represent(self, text: str) -> np.ndarray:
        import httpx

        try:
            resp = httpx.post(self.url, json={"text": text}, timeout=self.timeout_s)
        except httpx.TimeoutException as exc:
            raise LlmTimeoutError(str(exc)) from exc
        except httpx.TransportError as exc:
            raise LlmTransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise LlmProtocolError(f"upstream returned HTTP {resp.status_code}")
        try:
            vector = np.asarray(resp.json()["vector"], dtype=np.float64)
        except (KeyError, ValueError) as exc:
            raise LlmProtocolError(f"malformed payload: {exc}") from exc
        if vector.shape != (self._dim,):
            raise LlmProtocolError(f"vector shape {vector.shape}, want ({self._dim},)")
        return normalize(vector)
