"""Hybrid routing: classify fast, consult the LLM only under uncertainty.

Every query runs M sequential Monte Carlo dropout passes through the head.
A certain verdict keeps the classifier's thresholded prediction and never
touches the LLM; an uncertain one builds the full retrieval-augmented
prompt and defers to the LLM. Unstable verdicts (more distinct argmax
labels than ceil(M/2)) follow a configurable policy: route to the LLM
(default), fall back to the mean of the stochastic score vectors, or
reject as OOS outright.

The latency ledger charges the embedding plus all head passes to the
classifier stage and retrieval+prompt+LLM+parse to the LLM stage; the
clock is injectable so reports can be made bit-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .classifier import HeadModel, McConfig, mc_sample, predict, uncertainty
from .domain import LatencyBreakdown, RoutedPrediction, Source
from .embedding import EmbeddingProvider, VectorStore
from .evaluation import latency_stats
from .llm import ChatClient, ChatRequest, LlmError
from .prompting import LabelMask, RetrievalConfig, build_prompt, parse_response, retrieve_icl
from .seeds import derive_seed

UNSTABLE_ACTIONS = ("route_to_llm", "classifier_mean", "reject_oos")


@dataclass(frozen=True)
class RouterPolicy:
    mc: McConfig = field(default_factory=McConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    unstable_action: str = "route_to_llm"
    parse_failure_action: str = "oos"  # "oos" | "classifier"
    llm_failure_action: str = "classifier"  # "classifier" | "raise"
    max_tokens: int = 1024

    def __post_init__(self):
        if self.unstable_action not in UNSTABLE_ACTIONS:
            raise ValueError(f"unknown unstable_action {self.unstable_action!r}")


@dataclass
class RouterDeps:
    """Shared read-only state for routing; safe for concurrent route() calls."""

    head: HeadModel
    store: VectorStore
    provider: EmbeddingProvider
    mask: LabelMask
    descriptions: dict[str, str]
    llm: ChatClient
    template_dir: str | Path | None = None


@dataclass(frozen=True)
class BatchSummary:
    llm_call_fraction: float
    p50_total_ms: float
    p50_classifier_ms: float
    p50_llm_ms: float
    mean_total_ms: float


def _consult_llm(
    query: str,
    query_vec: np.ndarray,
    deps: RouterDeps,
    policy: RouterPolicy,
) -> tuple[frozenset[str] | None, str | None]:
    """Returns (labels, error). labels None means the call itself failed."""
    retrieved = retrieve_icl(query_vec, deps.store, policy.retrieval)
    bundle = build_prompt(
        query, retrieved, deps.mask, deps.descriptions, mode="with_oos", template_dir=deps.template_dir
    )
    try:
        response = deps.llm.complete(ChatRequest(prompt=bundle.text, max_tokens=policy.max_tokens))
    except LlmError as exc:
        if policy.llm_failure_action == "raise":
            raise
        return None, str(exc)
    parsed = parse_response(response.text, deps.mask)
    if parsed.is_failure:
        if policy.parse_failure_action == "classifier":
            return None, f"parse failure: {parsed.detail}"
        return frozenset(), None  # treat-as-OOS default
    return parsed.labels, None


def route(
    query: str,
    deps: RouterDeps,
    policy: RouterPolicy,
    clock: Callable[[], float] = time.perf_counter,
) -> RoutedPrediction:
    """Classify one query, deferring to the LLM only when the head is uncertain."""
    t_start = clock()
    query_vec = deps.provider.embed(query)
    det_scores, det_labels = predict(deps.head, query_vec)
    mc_cfg = McConfig(
        samples=policy.mc.samples,
        dropout_p=policy.mc.dropout_p,
        seed=derive_seed(policy.mc.seed, "mc", query),
    )
    samples = mc_sample(deps.head, query_vec, mc_cfg)
    t_classifier = clock()
    verdict = uncertainty(samples.labels, mc_cfg.samples)

    consult = verdict.verdict == "uncertain" or (
        verdict.verdict == "unstable" and policy.unstable_action == "route_to_llm"
    )

    labels = det_labels
    scores = det_scores
    source = Source.CLASSIFIER
    llm_error: str | None = None
    llm_ms = 0.0

    if consult:
        t_llm = clock()
        llm_labels, error = _consult_llm(query, query_vec, deps, policy)
        llm_ms = (clock() - t_llm) * 1000.0
        if llm_labels is not None:
            labels = llm_labels
            source = Source.LLM
        else:
            llm_error = error  # classifier fallback, flagged
    elif verdict.verdict == "unstable":
        if policy.unstable_action == "reject_oos":
            labels = frozenset()
        elif policy.unstable_action == "classifier_mean":
            mean_scores = samples.score_matrix.mean(axis=0)
            scores = {label: float(s) for label, s in zip(deps.head.label_order, mean_scores)}
            labels = frozenset(l for l, s in scores.items() if s >= deps.head.threshold)

    total_ms = (clock() - t_start) * 1000.0
    return RoutedPrediction(
        labels=labels,
        source=source,
        scores=scores,
        uncertainty=verdict.verdict,
        latency=LatencyBreakdown(
            classifier_ms=(t_classifier - t_start) * 1000.0,
            llm_ms=llm_ms,
            total_ms=total_ms,
        ),
        llm_error=llm_error,
    )


def batch_route(
    queries: Sequence[str],
    deps: RouterDeps,
    policy: RouterPolicy,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[list[RoutedPrediction], BatchSummary]:
    predictions = [route(q, deps, policy, clock) for q in queries]
    routed = sum(1 for p in predictions if p.source == Source.LLM)
    stats = latency_stats([p.latency for p in predictions])
    return predictions, BatchSummary(
        llm_call_fraction=routed / len(predictions) if predictions else 0.0,
        p50_total_ms=stats["total_ms"]["p50"],
        p50_classifier_ms=stats["classifier_ms"]["p50"],
        p50_llm_ms=stats["llm_ms"]["p50"],
        mean_total_ms=stats["total_ms"]["mean"],
    )
