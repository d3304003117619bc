"""Two-step OOS detection through internal model representations.

Step 1 forces an in-scope prediction: the prompt offers only the real
labels, with no escape hatch. Step 2 then screens that prediction by
comparing the query's internal representation against the stored
representations of the predicted intent's training sentences; the mean
cosine similarity must clear a threshold or the query is rejected as OOS.

Training sentences and queries pass through the identical wrapping
template before representation extraction; the bank records the template
id and refuses to score queries wrapped differently. Step 2 only encodes
a prompt, it never generates, so its cost is one forward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import Dataset
from .embedding import DimensionMismatchError
from .llm import ChatClient, ChatRequest, RepresentationProvider
from .prompting import LabelMask, RetrievedExample, build_prompt, parse_response

REPR_TEMPLATE_ID = "utterance-v1"
_REPR_TEMPLATES = {"utterance-v1": "Utterance: {text}"}


class TwoStepError(Exception):
    pass


class BankBuildError(TwoStepError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CalibrationError(TwoStepError):
    pass


def wrap_text(text: str, template_id: str = REPR_TEMPLATE_ID) -> str:
    try:
        return _REPR_TEMPLATES[template_id].format(text=text)
    except KeyError as exc:
        raise TwoStepError(f"unknown representation template {template_id!r}") from exc


@dataclass(frozen=True)
class TwoStepConfig:
    threshold: float = 0.5
    aggregation: str = "mean"  # "max" and "topk_mean" are experimental, off by default
    topk: int = 3
    template_id: str = REPR_TEMPLATE_ID

    def __post_init__(self):
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [-1, 1]")
        if self.aggregation not in ("mean", "max", "topk_mean"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


class RepresentationBank:
    """Immutable per-intent matrices of unit representation vectors."""

    def __init__(
        self,
        dim: int,
        provider_id: str,
        template_id: str,
        matrices: dict[str, np.ndarray],
    ):
        for intent_id, matrix in matrices.items():
            if matrix.ndim != 2 or (matrix.size and matrix.shape[1] != dim):
                raise DimensionMismatchError(f"bank rows for {intent_id!r} have shape {matrix.shape}")
        self.dim = dim
        self.provider_id = provider_id
        self.template_id = template_id
        self.matrices = matrices

    def rows(self, intent_id: str) -> np.ndarray:
        try:
            return self.matrices[intent_id]
        except KeyError as exc:
            raise TwoStepError(f"intent {intent_id!r} has no bank rows") from exc

    def row_counts(self) -> dict[str, int]:
        return {intent: matrix.shape[0] for intent, matrix in self.matrices.items()}

    def save(self, path_prefix: str | Path) -> None:
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        stacked = (
            np.concatenate([self.matrices[i] for i in self.matrices], axis=0)
            if self.matrices
            else np.zeros((0, self.dim))
        )
        Path(f"{prefix}.vecs").write_bytes(np.ascontiguousarray(stacked, dtype="<f8").tobytes())
        ranges: dict[str, list[int]] = {}
        offset = 0
        for intent_id, matrix in self.matrices.items():
            ranges[intent_id] = [offset, offset + matrix.shape[0]]
            offset += matrix.shape[0]
        index = {
            "dim": self.dim,
            "provider_id": self.provider_id,
            "template_id": self.template_id,
            "intents": ranges,
        }
        Path(f"{prefix}.idx.json").write_text(
            json.dumps(index, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path_prefix: str | Path) -> "RepresentationBank":
        prefix = Path(path_prefix)
        index = json.loads(Path(f"{prefix}.idx.json").read_text(encoding="utf-8"))
        dim = index["dim"]
        raw = np.frombuffer(Path(f"{prefix}.vecs").read_bytes(), dtype="<f8").reshape(-1, dim)
        matrices = {
            intent: raw[start:stop].astype(np.float64)
            for intent, (start, stop) in index["intents"].items()
        }
        return cls(
            dim=dim,
            provider_id=index["provider_id"],
            template_id=index["template_id"],
            matrices=matrices,
        )


def build_bank(
    dataset: Dataset,
    provider: RepresentationProvider,
    template_id: str = REPR_TEMPLATE_ID,
    checkpoint_prefix: str | Path | None = None,
) -> RepresentationBank:
    """Represent every labeled train sentence, grouped per intent.

    Multi-label sentences contribute a row to each of their intents. On a
    provider failure the rows built so far are checkpointed (when a prefix
    is given) and the build aborts.
    """
    matrices: dict[str, np.ndarray] = {}
    try:
        for intent in dataset.intents:
            rows = [
                provider.represent(wrap_text(utt.text, template_id))
                for utt in dataset.train
                if intent.id in utt.gold_labels
            ]
            matrices[intent.id] = np.stack(rows) if rows else np.zeros((0, provider.dim))
    except Exception as exc:
        checkpoint = None
        if checkpoint_prefix is not None:
            partial = RepresentationBank(
                dim=provider.dim,
                provider_id=getattr(provider, "provider_id", "unknown"),
                template_id=template_id,
                matrices=matrices,
            )
            partial.save(checkpoint_prefix)
            checkpoint = str(checkpoint_prefix)
        raise BankBuildError(f"bank build aborted: {exc}", checkpoint=checkpoint) from exc
    return RepresentationBank(
        dim=provider.dim,
        provider_id=getattr(provider, "provider_id", "unknown"),
        template_id=template_id,
        matrices=matrices,
    )


@dataclass(frozen=True)
class Step1Result:
    intent_id: str
    extra_labels: tuple[str, ...] = ()  # flagged when the model answered more than one


def step1_predict(
    query: str,
    mask: LabelMask,
    descriptions: dict[str, str],
    llm: ChatClient,
    retrieved: dict[str, list[RetrievedExample]] | None = None,
    template_dir: str | Path | None = None,
    max_tokens: int = 1024,
) -> Step1Result:
    """Force an in-scope prediction; one retry on a parse failure, then error."""
    retrieved = retrieved if retrieved is not None else {i: [] for i in mask.intent_order}
    bundle = build_prompt(query, retrieved, mask, descriptions, mode="in_scope_only", template_dir=template_dir)
    last_detail = None
    for _ in range(2):
        response = llm.complete(ChatRequest(prompt=bundle.text, max_tokens=max_tokens))
        parsed = parse_response(response.text, mask)
        if parsed.kind == "labels":
            return Step1Result(intent_id=parsed.ordered[0], extra_labels=parsed.ordered[1:])
        last_detail = parsed.detail or parsed.kind
    raise TwoStepError(f"step 1 failed twice for query {query!r}: {last_detail}")


def step2_score(
    query_repr: np.ndarray,
    bank: RepresentationBank,
    intent_id: str,
    cfg: TwoStepConfig | None = None,
) -> float:
    """Aggregate cosine similarity between the query and the intent's bank rows."""
    cfg = cfg or TwoStepConfig()
    if cfg.template_id != bank.template_id:
        raise TwoStepError(
            f"bank was built with template {bank.template_id!r}, config wants {cfg.template_id!r}"
        )
    rows = bank.rows(intent_id)
    if rows.shape[0] == 0:
        raise TwoStepError(f"intent {intent_id!r} has an empty bank")
    sims = rows @ np.asarray(query_repr, dtype=np.float64)
    if cfg.aggregation == "mean":
        return float(sims.mean())
    if cfg.aggregation == "max":
        return float(sims.max())
    top = np.sort(sims)[-min(cfg.topk, len(sims)):]
    return float(top.mean())


@dataclass(frozen=True)
class Decision:
    in_scope: bool
    intent_id: str | None

    @property
    def labels(self) -> frozenset[str]:
        return frozenset({self.intent_id}) if self.in_scope and self.intent_id else frozenset()


def decide(score: float, threshold: float, intent_id: str) -> Decision:
    """Accept the step-1 intent when the score clears the threshold, else OOS."""
    if score >= threshold:
        return Decision(in_scope=True, intent_id=intent_id)
    return Decision(in_scope=False, intent_id=None)


@dataclass(frozen=True)
class ScoredExample:
    """One validation record after step 1 and step 2 scoring."""

    gold: frozenset[str]
    step1_intent: str
    score: float

    @property
    def gold_is_oos(self) -> bool:
        return not self.gold


def _two_step_f1(examples: Sequence[ScoredExample], threshold: float) -> float:
    from .evaluation import EvalRecord, micro_f1

    records = [
        EvalRecord(
            gold=ex.gold,
            predicted=decide(ex.score, threshold, ex.step1_intent).labels,
        )
        for ex in examples
    ]
    return micro_f1(records)


def calibrate_threshold(
    examples: Sequence[ScoredExample],
    max_inscope_drop: float | None = None,
) -> float:
    """Pick the acceptance threshold from validation scores.

    Unconstrained: the observed score maximizing micro F1 of the two-step
    decisions, ties to the smaller threshold. Constrained: the threshold
    maximizing OOS recall subject to rejecting at most max_inscope_drop of
    the gold-in-scope records, ties again to the smaller threshold.
    """
    if not any(ex.gold_is_oos for ex in examples):
        raise CalibrationError("cannot calibrate without gold-OOS validation examples")
    if not any(not ex.gold_is_oos for ex in examples):
        raise CalibrationError("cannot calibrate without in-scope validation examples")
    candidates = sorted({ex.score for ex in examples})

    if max_inscope_drop is None:
        best_theta, best_f1 = None, -1.0
        for theta in candidates:
            f1 = _two_step_f1(examples, theta)
            if f1 > best_f1:  # strict: ties keep the smaller threshold
                best_theta, best_f1 = theta, f1
        assert best_theta is not None
        return best_theta

    in_scope = [ex for ex in examples if not ex.gold_is_oos]
    oos = [ex for ex in examples if ex.gold_is_oos]
    best_theta, best_recall = None, -1.0
    for theta in candidates:
        rejected_in_scope = sum(1 for ex in in_scope if ex.score < theta) / len(in_scope)
        if rejected_in_scope > max_inscope_drop:
            continue
        recall = sum(1 for ex in oos if ex.score < theta) / len(oos)
        if recall > best_recall:
            best_theta, best_recall = theta, recall
    if best_theta is None:
        raise CalibrationError("no threshold satisfies the in-scope drop constraint")
    return best_theta


def score_validation(
    dataset: Dataset,
    bank: RepresentationBank,
    repr_provider: RepresentationProvider,
    mask: LabelMask,
    descriptions: dict[str, str],
    llm: ChatClient,
    cfg: TwoStepConfig | None = None,
    template_dir: str | Path | None = None,
) -> list[ScoredExample]:
    """Run step 1 and step 2 over the full validation split."""
    cfg = cfg or TwoStepConfig()
    examples: list[ScoredExample] = []
    for utt in list(dataset.valid_in_scope) + list(dataset.valid_oos):
        step1 = step1_predict(utt.text, mask, descriptions, llm, template_dir=template_dir)
        query_repr = repr_provider.represent(wrap_text(utt.text, cfg.template_id))
        score = step2_score(query_repr, bank, step1.intent_id, cfg)
        examples.append(ScoredExample(gold=utt.gold_labels, step1_intent=step1.intent_id, score=score))
    return examples


def examples_to_records(examples: Sequence[ScoredExample], threshold: float):
    """EvalRecords with the step-2 score as the continuous OOS score."""
    from .evaluation import EvalRecord

    return [
        EvalRecord(
            gold=ex.gold,
            predicted=decide(ex.score, threshold, ex.step1_intent).labels,
            oos_score=ex.score,
        )
        for ex in examples
    ]
