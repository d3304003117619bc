"""Metrics, threshold sweeps, latency statistics, and report emission.

OOS handling: a record whose gold set is empty is out of scope. For set
metrics the empty set is replaced by an "OOS" pseudo-label that exists
only inside this module, so OOS participates in F1 like any other class
without leaking into retrieval or prompting.

Continuous OOS scoring follows two conventions: classifier paths use the
maximum per-label score; black-box LLM paths score 1 when an in-scope
label was predicted and 0 otherwise. AUCROC is the Mann-Whitney
probability that a random in-scope record outscores a random OOS record,
ties counted one half, positive class in-scope.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import LatencyBreakdown

OOS_PSEUDO_LABEL = "OOS"


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class EvalRecord:
    gold: frozenset[str]
    predicted: frozenset[str]
    oos_score: float | None = None
    label_scores: dict[str, float] | None = None  # per-label scores for sweeps
    latency: LatencyBreakdown | None = None

    @property
    def gold_is_oos(self) -> bool:
        return not self.gold


def _with_pseudo(labels: frozenset[str]) -> frozenset[str]:
    return labels if labels else frozenset({OOS_PSEUDO_LABEL})


def _pair_counts(records: Sequence[EvalRecord]) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for r in records:
        gold = _with_pseudo(r.gold)
        pred = _with_pseudo(r.predicted)
        tp += len(gold & pred)
        fp += len(pred - gold)
        fn += len(gold - pred)
    return tp, fp, fn


def micro_f1(records: Sequence[EvalRecord]) -> float:
    """Micro-averaged F1 over (record, label) pairs, OOS as a class."""
    if not records:
        raise EvalError("micro_f1 needs at least one record")
    tp, fp, fn = _pair_counts(records)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 1.0


def macro_f1(records: Sequence[EvalRecord]) -> float:
    """Unweighted mean of per-label F1 over labels observed in gold or predictions."""
    if not records:
        raise EvalError("macro_f1 needs at least one record")
    labels: set[str] = set()
    for r in records:
        labels |= _with_pseudo(r.gold) | _with_pseudo(r.predicted)
    f1s = []
    for label in sorted(labels):
        tp = fp = fn = 0
        for r in records:
            in_gold = label in _with_pseudo(r.gold)
            in_pred = label in _with_pseudo(r.predicted)
            tp += in_gold and in_pred
            fp += in_pred and not in_gold
            fn += in_gold and not in_pred
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 1.0)
    return float(np.mean(f1s))


def f1_score(records: Sequence[EvalRecord], mode: str = "micro") -> float:
    if mode == "micro":
        return micro_f1(records)
    if mode == "macro":
        return macro_f1(records)
    raise EvalError(f"unknown F1 mode {mode!r}")


def oos_recall(records: Sequence[EvalRecord]) -> float:
    """Fraction of gold-OOS records predicted as OOS (empty set)."""
    oos = [r for r in records if r.gold_is_oos]
    if not oos:
        raise EvalError("oos_recall needs at least one gold-OOS record")
    return sum(1 for r in oos if not r.predicted) / len(oos)


def inscope_accuracy(records: Sequence[EvalRecord], match: str = "any") -> float:
    """Fraction of gold-in-scope records credited as correct.

    "any" credits a record when prediction and gold overlap; "exact"
    requires set equality.
    """
    in_scope = [r for r in records if not r.gold_is_oos]
    if not in_scope:
        raise EvalError("inscope_accuracy needs at least one in-scope record")
    if match == "any":
        hits = sum(1 for r in in_scope if r.gold & r.predicted)
    elif match == "exact":
        hits = sum(1 for r in in_scope if r.gold == r.predicted)
    else:
        raise EvalError(f"unknown match mode {match!r}")
    return hits / len(in_scope)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_roc(records: Sequence[EvalRecord]) -> float:
    """AUCROC of the continuous OOS score, in-scope positive, ties count half."""
    scores: list[float] = []
    positive: list[bool] = []
    for r in records:
        if r.oos_score is None:
            raise EvalError("auc_roc requires oos_score on every record")
        scores.append(r.oos_score)
        positive.append(not r.gold_is_oos)
    n_pos = sum(positive)
    n_neg = len(records) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("auc_roc needs both in-scope and OOS records")
    ranks = _midranks(np.asarray(scores, dtype=np.float64))
    rank_sum_pos = float(ranks[np.asarray(positive)].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class SweepResult:
    tau: float
    f1: float
    oos_recall: float | None


def best_f1_sweep(
    records: Sequence[EvalRecord],
    tau_grid: Sequence[float] = (0.0, 0.5, 1.0),
) -> SweepResult:
    """Evaluate micro F1 at every observed score plus the grid; ties pick larger tau."""
    candidates: set[float] = set(tau_grid)
    for r in records:
        if r.label_scores is None:
            raise EvalError("best_f1_sweep requires label_scores on every record")
        candidates.update(r.label_scores.values())

    has_oos = any(r.gold_is_oos for r in records)

    def rethreshold(tau: float) -> list[EvalRecord]:
        return [
            EvalRecord(
                gold=r.gold,
                predicted=frozenset(l for l, s in r.label_scores.items() if s >= tau),
            )
            for r in records
        ]

    best: SweepResult | None = None
    for tau in sorted(candidates):
        rethresholded = rethreshold(tau)
        f1 = micro_f1(rethresholded)
        if best is None or f1 >= best.f1:  # ties resolve to the larger tau
            recall = oos_recall(rethresholded) if has_oos else None
            best = SweepResult(tau=tau, f1=f1, oos_recall=recall)
    assert best is not None
    return best


def _lower_median(values: Sequence[float]) -> float:
    if not values:
        raise EvalError("median of empty sequence")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def latency_stats(breakdowns: Sequence[LatencyBreakdown]) -> dict[str, dict[str, float]]:
    """Lower-median p50 and mean for each latency component."""
    if not breakdowns:
        return {
            path: {"p50": 0.0, "mean": 0.0} for path in ("classifier_ms", "llm_ms", "total_ms")
        }
    out: dict[str, dict[str, float]] = {}
    for path in ("classifier_ms", "llm_ms", "total_ms"):
        values = [getattr(b, path) for b in breakdowns]
        out[path] = {"p50": _lower_median(values), "mean": float(np.mean(values))}
    return out


def latency_fraction(hybrid_mean: float, llm_only_mean: float) -> float:
    """Mean hybrid latency over mean LLM-only latency."""
    if llm_only_mean == 0:
        raise EvalError("llm_only_mean must be nonzero")
    return hybrid_mean / llm_only_mean


# --- reports ----------------------------------------------------------------

REPORT_COLUMNS = (
    "f1",
    "oos_recall",
    "inscope_accuracy",
    "auc_roc",
    "best_tau",
    "best_f1",
    "oos_recall_at_best_tau",
    "llm_call_fraction",
    "p50_total_ms",
    "mean_total_ms",
    "latency_fraction",
)


def summarize_records(
    records: Sequence[EvalRecord],
    f1_mode: str = "micro",
    sweep: bool = False,
) -> dict[str, float | None]:
    """Standard per-dataset metric row; entries are None where undefined."""
    row: dict[str, float | None] = {col: None for col in REPORT_COLUMNS}
    row["f1"] = f1_score(records, f1_mode)
    if any(r.gold_is_oos for r in records):
        row["oos_recall"] = oos_recall(records)
    if any(not r.gold_is_oos for r in records):
        row["inscope_accuracy"] = inscope_accuracy(records)
    try:
        row["auc_roc"] = auc_roc(records)
    except EvalError:
        pass
    if sweep and all(r.label_scores is not None for r in records):
        result = best_f1_sweep(records)
        row["best_tau"] = result.tau
        row["best_f1"] = result.f1
        row["oos_recall_at_best_tau"] = result.oos_recall
    latencies = [r.latency for r in records if r.latency is not None]
    if latencies:
        stats = latency_stats(latencies)
        row["p50_total_ms"] = stats["total_ms"]["p50"]
        row["mean_total_ms"] = stats["total_ms"]["mean"]
    return row


def build_report(
    dataset_rows: dict[str, dict[str, float | None]],
    f1_mode: str = "micro",
    exclude_from_avg: Sequence[str] = (),
) -> dict:
    """Aggregate per-dataset rows; the average score is unweighted across datasets.

    Each name in exclude_from_avg adds a leave-one-out average column.
    """

    def avg(names: Iterable[str]) -> float | None:
        values = [dataset_rows[n]["f1"] for n in names if dataset_rows[n].get("f1") is not None]
        return float(np.mean(values)) if values else None

    all_names = list(dataset_rows)
    summary: dict[str, object] = {"avg_score": avg(all_names), "f1_mode": f1_mode}
    for name in exclude_from_avg:
        summary[f"avg_score_wo_{name}"] = avg(n for n in all_names if n != name)
    return {"datasets": dataset_rows, "summary": summary}


def write_report(report: dict, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is None:
        return
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("dataset",) + REPORT_COLUMNS)
        for name, row in report["datasets"].items():
            writer.writerow(
                [name] + ["" if row.get(col) is None else f"{row[col]:.6f}" for col in REPORT_COLUMNS]
            )
        avg_score = report["summary"].get("avg_score")
        writer.writerow(["AVG", "" if avg_score is None else f"{avg_score:.6f}"] + [""] * (len(REPORT_COLUMNS) - 1))
