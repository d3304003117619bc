"""Controlled label-space experiments over a hierarchical leaf-intent corpus.

The bundled corpus has 20 leaf intents under two parents, 10 utterances
per leaf, and 3 pre-curated paraphrases per utterance. Experiments compose
broader intents by grouping S same-parent leaves without replacement, pick L
of them as the label space, split each covered leaf's utterances 5 train /
5 test, and use the test halves (plus paraphrases) of every uncovered leaf
as the OOS pool. Sweeping S and L over repeated seeded runs produces
plot-ready curves of OOS detection quality versus label-space design.

A cell (S, L) is feasible iff L <= 2 * floor(10 / S); infeasible cells are
reported as truncated rather than errored. A feasible cell that covers all
20 leaves has an empty OOS pool and is reported as degenerate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .classifier import TrainConfig, predict, train_head, training_matrix
from .domain import Dataset, IntentLabel, LabeledUtterance, Origin
from .embedding import HashingEmbedder
from .evaluation import EvalRecord, auc_roc, inscope_accuracy, oos_recall
from .seeds import derive_seed

LEAVES_PER_PARENT = 10
UTTERANCES_PER_LEAF = 10
PARAPHRASES_PER_UTTERANCE = 3
TRAIN_PER_LEAF = 5


class LabError(Exception):
    pass


class InfeasibleExperimentError(LabError):
    pass


@dataclass(frozen=True)
class LeafIntent:
    id: str
    parent: str
    name: str
    utterances: tuple[str, ...]
    paraphrases: tuple[tuple[str, ...], ...]  # aligned with utterances


@dataclass(frozen=True)
class ScopedIntent:
    id: str
    parent: str
    leaf_ids: frozenset[str]


def load_leaves(path: str | Path | None = None) -> list[LeafIntent]:
    """Load and validate the leaf corpus; defaults to the bundled fixture."""
    if path is None:
        text = (resources.files("intentgate") / "data" / "leaves.jsonl").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    leaves: list[LeafIntent] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        leaves.append(
            LeafIntent(
                id=obj["id"],
                parent=obj["parent"],
                name=obj.get("name", obj["id"]),
                utterances=tuple(obj["utterances"]),
                paraphrases=tuple(tuple(p) for p in obj["paraphrases"]),
            )
        )
    _validate_leaves(leaves)
    return leaves


def _validate_leaves(leaves: Sequence[LeafIntent]) -> None:
    parents = sorted({leaf.parent for leaf in leaves})
    if len(parents) != 2:
        raise LabError(f"corpus must have exactly 2 parents, found {parents}")
    for parent in parents:
        count = sum(1 for leaf in leaves if leaf.parent == parent)
        if count != LEAVES_PER_PARENT:
            raise LabError(f"parent {parent!r} has {count} leaves, want {LEAVES_PER_PARENT}")
    for leaf in leaves:
        if len(leaf.utterances) != UTTERANCES_PER_LEAF:
            raise LabError(f"leaf {leaf.id!r} has {len(leaf.utterances)} utterances")
        if len(leaf.paraphrases) != UTTERANCES_PER_LEAF or any(
            len(p) != PARAPHRASES_PER_UTTERANCE for p in leaf.paraphrases
        ):
            raise LabError(f"leaf {leaf.id!r} has an incomplete paraphrase table")


def max_label_count(scope: int) -> int:
    return 2 * (LEAVES_PER_PARENT // scope)


def is_feasible(scope: int, label_count: int) -> bool:
    return 1 <= scope <= 5 and 1 <= label_count <= max_label_count(scope)


def compose_intents(
    leaves: Sequence[LeafIntent], scope: int, rng: np.random.Generator
) -> list[ScopedIntent]:
    """Group same-parent leaves into disjoint scoped intents, floor(10/S) per parent."""
    if not 1 <= scope <= 5:
        raise LabError("scope must be in [1, 5]")
    intents: list[ScopedIntent] = []
    for parent in sorted({leaf.parent for leaf in leaves}):
        members = [leaf for leaf in leaves if leaf.parent == parent]
        order = rng.permutation(len(members))
        for g in range(len(members) // scope):
            group = [members[order[g * scope + i]].id for i in range(scope)]
            intents.append(
                ScopedIntent(
                    id=f"s{scope}:" + "+".join(sorted(group)),
                    parent=parent,
                    leaf_ids=frozenset(group),
                )
            )
    return intents


def make_experiment(
    leaves: Sequence[LeafIntent], scope: int, label_count: int, seed: int
) -> Dataset:
    """One controlled dataset: L scoped intents of scope S, rest of the corpus as OOS.

    Per covered leaf: 5 random utterances train, the other 5 plus their
    paraphrases test. Every uncovered leaf contributes its test half (plus
    paraphrases) to the OOS pool. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    intents = compose_intents(leaves, scope, rng)
    if label_count > len(intents):
        raise InfeasibleExperimentError(
            f"scope {scope} admits at most {len(intents)} intents, asked for {label_count}"
        )
    chosen_idx = rng.choice(len(intents), size=label_count, replace=False)
    chosen = [intents[int(i)] for i in chosen_idx]

    # one split per leaf, drawn in corpus order so it is independent of the choice
    splits: dict[str, tuple[list[int], list[int]]] = {}
    for leaf in leaves:
        perm = rng.permutation(UTTERANCES_PER_LEAF)
        splits[leaf.id] = (list(perm[:TRAIN_PER_LEAF]), list(perm[TRAIN_PER_LEAF:]))

    by_id = {leaf.id: leaf for leaf in leaves}
    covered = {leaf_id for intent in chosen for leaf_id in intent.leaf_ids}

    train: list[LabeledUtterance] = []
    valid_in: list[LabeledUtterance] = []
    valid_oos: list[LabeledUtterance] = []

    for intent in chosen:
        for leaf_id in sorted(intent.leaf_ids):
            leaf = by_id[leaf_id]
            train_idx, test_idx = splits[leaf_id]
            gold = frozenset({intent.id})
            for i in train_idx:
                train.append(LabeledUtterance(text=leaf.utterances[i], gold_labels=gold))
            for i in test_idx:
                valid_in.append(LabeledUtterance(text=leaf.utterances[i], gold_labels=gold))
                for para in leaf.paraphrases[i]:
                    valid_in.append(
                        LabeledUtterance(text=para, gold_labels=gold, origin=Origin.PARAPHRASE)
                    )

    for leaf in leaves:
        if leaf.id in covered:
            continue
        _, test_idx = splits[leaf.id]
        for i in test_idx:
            valid_oos.append(LabeledUtterance(text=leaf.utterances[i], gold_labels=frozenset()))
            for para in leaf.paraphrases[i]:
                valid_oos.append(
                    LabeledUtterance(text=para, gold_labels=frozenset(), origin=Origin.PARAPHRASE)
                )

    intent_labels = tuple(
        IntentLabel(
            id=intent.id,
            display_name=" + ".join(sorted(by_id[l].name for l in intent.leaf_ids)),
        )
        for intent in chosen
    )
    return Dataset(
        intents=intent_labels,
        train=tuple(train),
        valid_in_scope=tuple(valid_in),
        valid_oos=tuple(valid_oos),
    )


# --- systems under test -------------------------------------------------------


class LabSystem(Protocol):
    def evaluate(self, dataset: Dataset, seed: int) -> list[EvalRecord]: ...


class MockOracleSystem:
    """Perfect predictor; pins the harness itself (AUCROC 1.0 everywhere)."""

    name = "mock-oracle"

    def evaluate(self, dataset: Dataset, seed: int) -> list[EvalRecord]:
        records = []
        for utt in list(dataset.valid_in_scope) + list(dataset.valid_oos):
            records.append(
                EvalRecord(
                    gold=utt.gold_labels,
                    predicted=utt.gold_labels,
                    oos_score=1.0 if utt.gold_labels else 0.0,
                )
            )
        return records


class ClassifierSystem:
    """Embedding-head classifier cell: batch size 16, 5 epochs."""

    name = "classifier"

    def __init__(self, dim: int = 256, learning_rate: float = 5e-3, threshold: float = 0.5):
        self.provider = HashingEmbedder(dim)
        self.learning_rate = learning_rate
        self.threshold = threshold

    def evaluate(self, dataset: Dataset, seed: int) -> list[EvalRecord]:
        x, y, label_order = training_matrix(dataset, self.provider)
        cfg = TrainConfig(learning_rate=self.learning_rate, epochs=5, batch_size=16, seed=seed)
        head = train_head(x, y, label_order, cfg, threshold=self.threshold)
        records = []
        for utt in list(dataset.valid_in_scope) + list(dataset.valid_oos):
            scores, labels = predict(head, self.provider.embed(utt.text))
            records.append(
                EvalRecord(
                    gold=utt.gold_labels,
                    predicted=labels,
                    oos_score=max(scores.values()),
                    label_scores=scores,
                )
            )
        return records


SYSTEMS = {
    "mock-oracle": MockOracleSystem,
    "classifier": ClassifierSystem,
}


# --- grid runner -------------------------------------------------------------


@dataclass(frozen=True)
class CellResult:
    scope: int
    label_count: int
    status: str  # "ok" | "truncated" | "degenerate"
    repeats: int
    auc_roc: float | None
    inscope_accuracy: float | None
    oos_recall: float | None


def run_grid(
    system: LabSystem,
    scopes: Sequence[int] = (1, 2, 3, 4, 5),
    label_counts: Sequence[int] = (1, 2, 3, 4, 5),
    repeats: int = 10,
    master_seed: int = 0,
    leaves: Sequence[LeafIntent] | None = None,
) -> list[CellResult]:
    """Mean metrics per (S, L) cell over seeded repeats."""
    leaves = list(leaves) if leaves is not None else load_leaves()
    results: list[CellResult] = []
    for scope in scopes:
        for label_count in label_counts:
            if not is_feasible(scope, label_count):
                results.append(
                    CellResult(scope, label_count, "truncated", 0, None, None, None)
                )
                continue
            aucs: list[float] = []
            accs: list[float] = []
            recalls: list[float] = []
            degenerate = False
            for rep in range(repeats):
                seed = derive_seed(master_seed, "cell", str(scope), str(label_count), str(rep))
                dataset = make_experiment(leaves, scope, label_count, seed)
                records = system.evaluate(dataset, seed)
                accs.append(inscope_accuracy(records))
                if dataset.valid_oos:
                    aucs.append(auc_roc(records))
                    recalls.append(oos_recall(records))
                else:
                    degenerate = True
            results.append(
                CellResult(
                    scope=scope,
                    label_count=label_count,
                    status="degenerate" if degenerate else "ok",
                    repeats=repeats,
                    auc_roc=float(np.mean(aucs)) if aucs else None,
                    inscope_accuracy=float(np.mean(accs)) if accs else None,
                    oos_recall=float(np.mean(recalls)) if recalls else None,
                )
            )
    return results


def write_curves_csv(results: Sequence[CellResult], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ("scope", "label_count", "status", "repeats", "auc_roc", "inscope_accuracy", "oos_recall")
        )
        for r in results:
            writer.writerow(
                [
                    r.scope,
                    r.label_count,
                    r.status,
                    r.repeats,
                    "" if r.auc_roc is None else f"{r.auc_roc:.6f}",
                    "" if r.inscope_accuracy is None else f"{r.inscope_accuracy:.6f}",
                    "" if r.oos_recall is None else f"{r.oos_recall:.6f}",
                ]
            )
