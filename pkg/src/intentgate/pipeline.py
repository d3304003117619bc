"""End-to-end wiring: build artifacts from a config, evaluate systems, report.

The intent bundle (dataset, store, trained head, label mask, descriptions,
LLM client) is built once and shared read-only by the router, the
evaluation harness, and the HTTP service. Reports can run on a logical
clock (one millisecond per reading) instead of the wall clock, which makes
them bit-reproducible under a fixed master seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from . import oos_twostep
from .augmentation import augment_dataset
from .classifier import HeadModel, predict, train_head, training_matrix
from .config import RunConfig
from .domain import (
    Dataset,
    LabeledUtterance,
    LatencyBreakdown,
    Source,
    dataset_hash,
    load_dataset,
    validate_dataset,
)
from .embedding import (
    EmbeddingProvider,
    HashingEmbedder,
    RemoteEmbeddingProvider,
    VectorStore,
    build_store,
)
from .evaluation import EvalRecord, build_report, summarize_records
from .llm import (
    ChatClient,
    ChatRequest,
    HashingRepresentationProvider,
    HttpChatClient,
    MockLlm,
    RequestLog,
)
from .prompting import (
    K_GRID,
    T_GRID,
    DescriptionStore,
    LabelMask,
    RetrievalConfig,
    build_prompt,
    generate_description,
    mask_labels,
    parse_response,
    retrieve_icl,
)
from .router import RouterDeps, RouterPolicy, batch_route


class PipelineError(Exception):
    pass


class TickClock:
    """Logical clock: every reading advances one millisecond."""

    def __init__(self):
        self._now = 0.0

    def __call__(self) -> float:
        self._now += 0.001
        return self._now


def make_clock(timing: str) -> Callable[[], float]:
    return TickClock() if timing == "logical" else time.perf_counter


def make_provider(cfg: RunConfig) -> EmbeddingProvider:
    if cfg.embedding.kind == "hashing":
        return HashingEmbedder(cfg.embedding.dim)
    return RemoteEmbeddingProvider(cfg.embedding.url, cfg.embedding.dim)


def example_descriptions(dataset: Dataset, max_examples: int = 3) -> dict[str, str]:
    """Deterministic local fallback when no generated descriptions exist."""
    out: dict[str, str] = {}
    for intent in dataset.intents:
        examples = [u.text for u in dataset.train if intent.id in u.gold_labels][:max_examples]
        if intent.description:
            out[intent.id] = intent.description
        elif examples:
            out[intent.id] = "Requests similar to: " + "; ".join(examples)
        else:
            out[intent.id] = intent.display_name
    return out


def make_llm(cfg: RunConfig, oracle: dict[str, frozenset[str]], mask: LabelMask) -> ChatClient:
    log = RequestLog(cfg.llm.request_log) if cfg.llm.request_log else None
    if cfg.llm.kind == "http":
        return HttpChatClient(
            url=cfg.llm.url,
            model_name=cfg.llm.model_name,
            auth_token=cfg.llm.auth_token,
            timeout_s=cfg.llm.timeout_s,
            retries=cfg.llm.retries,
            log=log,
        )
    return MockLlm(
        oracle=oracle,
        mask=mask,
        error_rate=cfg.llm.error_rate,
        oos_miss_rate=cfg.llm.oos_miss_rate,
        seed=cfg.seed_for("llm-mock"),
        log=log,
    )


@dataclass
class Bundle:
    """Everything a router or service instance needs, immutable in use."""

    dataset: Dataset
    provider: EmbeddingProvider
    store: VectorStore
    head: HeadModel
    mask: LabelMask
    descriptions: dict[str, str]
    llm: ChatClient
    policy: RouterPolicy

    def router_deps(self) -> RouterDeps:
        return RouterDeps(
            head=self.head,
            store=self.store,
            provider=self.provider,
            mask=self.mask,
            descriptions=self.descriptions,
            llm=self.llm,
        )


def build_bundle(cfg: RunConfig, dataset: Dataset | None = None) -> Bundle:
    """Load, augment, embed, and train; returns the shared serving bundle."""
    if dataset is None:
        dataset = load_dataset(cfg.dataset.utterances, cfg.dataset.intents)
    violations = validate_dataset(dataset)
    if violations:
        raise PipelineError(
            "dataset is invalid:\n" + "\n".join(f"  {v}" for v in violations[:20])
        )

    if cfg.augment_enabled:
        augmented = augment_dataset(dataset.train, cfg.augmentation)
        dataset = replace(dataset, train=dataset.train + tuple(augmented))

    provider = make_provider(cfg)
    store = build_store(provider, dataset)
    x, y, label_order = training_matrix(dataset, provider)
    head = train_head(x, y, label_order, cfg.train, threshold=cfg.threshold)
    mask = mask_labels(list(dataset.intents), cfg.seed_for("mask"))

    descriptions_path = cfg.artifacts_dir / "descriptions.json"
    if descriptions_path.exists():
        descriptions = DescriptionStore(descriptions_path).as_dict()
    else:
        descriptions = example_descriptions(dataset)

    oracle = {
        u.text: u.gold_labels
        for u in list(dataset.train) + list(dataset.valid_in_scope) + list(dataset.valid_oos)
    }
    llm = make_llm(cfg, oracle, mask)
    policy = RouterPolicy(
        mc=cfg.mc,
        retrieval=cfg.retrieval,
        unstable_action=cfg.router.unstable_action,
        parse_failure_action=cfg.router.parse_failure_action,
        llm_failure_action=cfg.router.llm_failure_action,
    )
    return Bundle(
        dataset=dataset,
        provider=provider,
        store=store,
        head=head,
        mask=mask,
        descriptions=descriptions,
        llm=llm,
        policy=policy,
    )


def save_artifacts(bundle: Bundle, cfg: RunConfig) -> dict[str, str]:
    """Persist trained artifacts under the configured directory."""
    out = Path(cfg.artifacts_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle.head.save(out / "head")
    bundle.store.save(out / "store")
    return {"head": str(out / "head"), "store": str(out / "store")}


def generate_descriptions(cfg: RunConfig, bundle: Bundle) -> dict[str, str]:
    """Generate and cache intent descriptions through the configured LLM."""
    store = DescriptionStore(cfg.artifacts_dir / "descriptions.json")
    ds_hash = dataset_hash(bundle.dataset)
    out: dict[str, str] = {}
    for intent in bundle.dataset.intents:
        examples = [u.text for u in bundle.dataset.train if intent.id in u.gold_labels]
        out[intent.id] = generate_description(
            intent, examples, bundle.llm, store=store, dataset_hash=ds_hash
        )
    return out


# --- system evaluators --------------------------------------------------------


def _valid_utterances(dataset: Dataset) -> list[LabeledUtterance]:
    return list(dataset.valid_in_scope) + list(dataset.valid_oos)


def evaluate_classifier(bundle: Bundle, clock: Callable[[], float]) -> list[EvalRecord]:
    records = []
    for utt in _valid_utterances(bundle.dataset):
        t0 = clock()
        scores, labels = predict(bundle.head, bundle.provider.embed(utt.text))
        elapsed = (clock() - t0) * 1000.0
        records.append(
            EvalRecord(
                gold=utt.gold_labels,
                predicted=labels,
                oos_score=max(scores.values()),
                label_scores=scores,
                latency=LatencyBreakdown(classifier_ms=elapsed, llm_ms=0.0, total_ms=elapsed),
            )
        )
    return records


def evaluate_llm(bundle: Bundle, clock: Callable[[], float]) -> list[EvalRecord]:
    records = []
    for utt in _valid_utterances(bundle.dataset):
        t0 = clock()
        vec = bundle.provider.embed(utt.text)
        retrieved = retrieve_icl(vec, bundle.store, bundle.policy.retrieval)
        prompt = build_prompt(utt.text, retrieved, bundle.mask, bundle.descriptions, mode="with_oos")
        response = bundle.llm.complete(ChatRequest(prompt=prompt.text))
        parsed = parse_response(response.text, bundle.mask)
        predicted = parsed.labels if not parsed.is_failure else frozenset()
        elapsed = (clock() - t0) * 1000.0
        records.append(
            EvalRecord(
                gold=utt.gold_labels,
                predicted=predicted,
                oos_score=1.0 if predicted else 0.0,
                latency=LatencyBreakdown(classifier_ms=0.0, llm_ms=elapsed, total_ms=elapsed),
            )
        )
    return records


def evaluate_hybrid(bundle: Bundle, clock: Callable[[], float]) -> tuple[list[EvalRecord], dict]:
    utterances = _valid_utterances(bundle.dataset)
    predictions, summary = batch_route(
        [u.text for u in utterances], bundle.router_deps(), bundle.policy, clock
    )
    records = []
    for utt, pred in zip(utterances, predictions):
        if pred.source == Source.CLASSIFIER:
            oos_score = max(pred.scores.values()) if pred.scores else 0.0
        else:
            oos_score = 1.0 if pred.labels else 0.0
        records.append(
            EvalRecord(
                gold=utt.gold_labels,
                predicted=pred.labels,
                oos_score=oos_score,
                latency=pred.latency,
            )
        )
    stats = {
        "llm_call_fraction": summary.llm_call_fraction,
        "p50_total_ms": summary.p50_total_ms,
        "mean_total_ms": summary.mean_total_ms,
    }
    return records, stats


def evaluate_two_step(
    bundle: Bundle,
    cfg: RunConfig,
    theta: float | str = "auto",
) -> list[EvalRecord]:
    """In-scope-only prediction screened by representation similarity."""
    repr_provider = HashingRepresentationProvider(cfg.embedding.dim)
    bank = oos_twostep.build_bank(bundle.dataset, repr_provider, cfg.two_step.template_id)
    examples = oos_twostep.score_validation(
        bundle.dataset,
        bank,
        repr_provider,
        bundle.mask,
        bundle.descriptions,
        bundle.llm,
        cfg.two_step,
    )
    if theta == "auto":
        threshold = oos_twostep.calibrate_threshold(examples)
    else:
        threshold = float(theta)
    return oos_twostep.examples_to_records(examples, threshold)


def evaluate_system(
    cfg: RunConfig,
    system: str,
    bundle: Bundle | None = None,
    grid: Sequence[str] = (),
    theta: float | str = "auto",
) -> dict:
    """Run one system over the validation split and build its report."""
    bundle = bundle or build_bundle(cfg)
    clock = make_clock(cfg.eval.timing)
    extras: dict = {}

    if grid and system in ("llm", "hybrid"):
        return _evaluate_grid(cfg, system, bundle, grid)

    if system == "classifier":
        records = evaluate_classifier(bundle, clock)
        row = summarize_records(records, cfg.eval.f1_mode, sweep=True)
    elif system == "llm":
        records = evaluate_llm(bundle, clock)
        row = summarize_records(records, cfg.eval.f1_mode)
    elif system == "hybrid":
        records, extras = evaluate_hybrid(bundle, clock)
        row = summarize_records(records, cfg.eval.f1_mode)
        row["llm_call_fraction"] = extras["llm_call_fraction"]
    elif system == "two_step":
        records = evaluate_two_step(bundle, cfg, theta)
        row = summarize_records(records, cfg.eval.f1_mode)
    else:
        raise PipelineError(f"unknown system {system!r}")

    report = build_report({system: row}, f1_mode=cfg.eval.f1_mode)
    report["system"] = system
    report["master_seed"] = cfg.master_seed
    return report


def _grid_values(dimension: str) -> list[float]:
    if dimension == "k":
        return list(K_GRID)
    if dimension == "t":
        return list(T_GRID)
    raise PipelineError(f"unknown grid dimension {dimension!r}")


def _evaluate_grid(cfg: RunConfig, system: str, bundle: Bundle, grid: Sequence[str]) -> dict:
    """Sweep retrieval settings over the standard grids; report every cell."""
    dims = [d.strip() for d in grid if d.strip()]
    ks = _grid_values("k") if "k" in dims else [cfg.retrieval.k]
    ts = _grid_values("t") if "t" in dims else [cfg.retrieval.t]
    clock = make_clock(cfg.eval.timing)
    rows: dict[str, dict] = {}
    best_cell, best_f1 = None, -1.0
    for k in ks:
        for t in ts:
            cell_bundle = replace(
                bundle, policy=replace(bundle.policy, retrieval=RetrievalConfig(k=int(k), t=float(t)))
            )
            if system == "llm":
                records = evaluate_llm(cell_bundle, clock)
            else:
                records, _ = evaluate_hybrid(cell_bundle, clock)
            row = summarize_records(records, cfg.eval.f1_mode)
            name = f"k={int(k)},t={t:g}"
            rows[name] = row
            if row["f1"] is not None and row["f1"] > best_f1:
                best_cell, best_f1 = name, row["f1"]
    report = build_report(rows, f1_mode=cfg.eval.f1_mode)
    report["system"] = system
    report["best_cell"] = best_cell
    return report


def run_end_to_end(cfg: RunConfig, dataset: Dataset | None = None) -> dict:
    """augment -> train -> evaluate -> route, one master seed end to end."""
    bundle = build_bundle(cfg, dataset)
    clock = make_clock(cfg.eval.timing)
    classifier_records = evaluate_classifier(bundle, clock)
    hybrid_records, hybrid_stats = evaluate_hybrid(bundle, clock)
    rows = {
        "classifier": summarize_records(classifier_records, cfg.eval.f1_mode, sweep=True),
        "hybrid": summarize_records(hybrid_records, cfg.eval.f1_mode),
    }
    rows["hybrid"]["llm_call_fraction"] = hybrid_stats["llm_call_fraction"]
    report = build_report(rows, f1_mode=cfg.eval.f1_mode)
    report["master_seed"] = cfg.master_seed
    report["train_size"] = len(bundle.dataset.train)
    return report
