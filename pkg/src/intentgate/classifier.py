"""Per-label linear+sigmoid classification head over embeddings.

Trained with mini-batch SGD on mean per-label binary cross-entropy plus an
L2 penalty on the weights. Multi-label is first class: targets are
multi-hot vectors and augmented OOS rows carry all-zero targets. Inference
thresholds each label's sigmoid score at tau; an empty passing set is an
OOS prediction.

Predictive uncertainty comes from Monte Carlo dropout applied to the head's
input features: M stochastic forward passes, each recording the argmax
label. The verdict depends only on how many distinct argmax labels appear:
one means certain, up to ceil(M/2) means uncertain, more means unstable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ClassifierError(Exception):
    pass


class TrainingDivergedError(ClassifierError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    epochs: int = 10
    batch_size: int = 32
    l2: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class McConfig:
    samples: int = 10  # M
    dropout_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass(frozen=True)
class UncertaintyVerdict:
    verdict: str  # "certain" | "uncertain" | "unstable"
    distinct_count: int


@dataclass(frozen=True)
class McSamples:
    labels: list[str]  # argmax label per stochastic pass
    score_matrix: np.ndarray  # (M, C) sigmoid scores per pass

    @property
    def score_variance(self) -> np.ndarray:
        """Per-label variance across passes (diagnostic only)."""
        return self.score_matrix.var(axis=0)


@dataclass
class HeadModel:
    weights: np.ndarray  # (dim, C)
    bias: np.ndarray  # (C,)
    label_order: list[str]
    threshold: float = 0.5
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_labels(self) -> int:
        return self.weights.shape[1]

    def save(self, path_prefix: str | Path) -> None:
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "label_order": self.label_order,
            "threshold": self.threshold,
            "dim": self.dim,
        }
        Path(f"{prefix}.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        flat = np.concatenate([self.weights.reshape(-1), self.bias])
        Path(f"{prefix}.bin").write_bytes(np.ascontiguousarray(flat, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path_prefix: str | Path) -> "HeadModel":
        prefix = Path(path_prefix)
        meta = json.loads(Path(f"{prefix}.json").read_text(encoding="utf-8"))
        dim, labels = meta["dim"], meta["label_order"]
        flat = np.frombuffer(Path(f"{prefix}.bin").read_bytes(), dtype="<f8").astype(np.float64)
        n = len(labels)
        weights = flat[: dim * n].reshape(dim, n)
        bias = flat[dim * n :]
        return cls(weights=weights, bias=bias, label_order=list(labels), threshold=meta["threshold"])


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    expz = np.exp(z[~pos])
    out[~pos] = expz / (1.0 + expz)
    return out


def bce_loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    l2: float = 0.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean per-(row,label) BCE from logits plus 0.5*l2*||W||^2.

    Returns (loss, grad_weights, grad_bias); the analytic gradients are what
    training descends and what the finite-difference check exercises.
    """
    n, c = y.shape
    z = x @ weights + bias
    # stable log(1 + exp(-|z|)) formulation
    per_elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_elem.mean()) + 0.5 * l2 * float(np.sum(weights * weights))
    dz = (sigmoid(z) - y) / (n * c)
    grad_w = x.T @ dz + l2 * weights
    grad_b = dz.sum(axis=0)
    return loss, grad_w, grad_b


def train_head(
    x: np.ndarray,
    y: np.ndarray,
    label_order: Sequence[str],
    cfg: TrainConfig,
    threshold: float = 0.5,
) -> HeadModel:
    """Mini-batch SGD on the BCE objective; deterministic for a fixed seed.

    x is (N, dim) embeddings, y is (N, C) multi-hot targets (all-zero rows
    for OOS negatives). Records the full-data loss after every epoch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    if y.shape[1] != len(label_order):
        raise ValueError(f"y has {y.shape[1]} columns but label_order has {len(label_order)}")

    n, dim = x.shape
    c = y.shape[1]
    rng = np.random.default_rng(cfg.seed)
    weights = np.zeros((dim, c), dtype=np.float64)
    bias = np.zeros(c, dtype=np.float64)

    epoch_losses: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected, not warned
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                _, grad_w, grad_b = bce_loss_and_grad(weights, bias, x[batch], y[batch], cfg.l2)
                weights -= cfg.learning_rate * grad_w
                bias -= cfg.learning_rate * grad_b
            loss, _, _ = bce_loss_and_grad(weights, bias, x, y, cfg.l2)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch + 1}/{cfg.epochs} "
                    f"(lr={cfg.learning_rate}, batch_size={cfg.batch_size})"
                )
            epoch_losses.append(loss)

    return HeadModel(
        weights=weights,
        bias=bias,
        label_order=list(label_order),
        threshold=threshold,
        epoch_losses=epoch_losses,
    )


def training_matrix(dataset, provider) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Embeddings and multi-hot targets for every train utterance.

    Augmented OOS rows get all-zero target vectors. Returns (x, y,
    label_order) with label_order following the dataset's intent order.
    """
    label_order = [intent.id for intent in dataset.intents]
    index = {label: i for i, label in enumerate(label_order)}
    texts = [utt.text for utt in dataset.train]
    x = provider.embed_batch(texts)
    y = np.zeros((len(texts), len(label_order)), dtype=np.float64)
    for row, utt in enumerate(dataset.train):
        for label in utt.gold_labels:
            y[row, index[label]] = 1.0
    return x, y, label_order


def score_vector(head: HeadModel, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (head.dim,):
        raise ValueError(f"vector shape {v.shape} does not match head dim {head.dim}")
    return sigmoid(v @ head.weights + head.bias)


def predict(head: HeadModel, v: np.ndarray) -> tuple[dict[str, float], frozenset[str]]:
    """Per-label sigmoid scores and the set of labels at or above tau."""
    scores = score_vector(head, v)
    score_map = {label: float(s) for label, s in zip(head.label_order, scores)}
    labels = frozenset(label for label, s in score_map.items() if s >= head.threshold)
    return score_map, labels


def mc_sample(head: HeadModel, v: np.ndarray, mc: McConfig) -> McSamples:
    """M sequential stochastic passes with inverted dropout on the features.

    Each pass masks features with Bernoulli(1 - dropout_p), rescales the
    survivors by 1/(1 - dropout_p), and records the argmax label.
    """
    v = np.asarray(v, dtype=np.float64)
    rng = np.random.default_rng(mc.seed)
    keep = 1.0 - mc.dropout_p
    labels: list[str] = []
    rows = np.empty((mc.samples, head.n_labels), dtype=np.float64)
    for i in range(mc.samples):
        if mc.dropout_p == 0.0:
            dropped = v
        else:
            mask = rng.random(v.shape[0]) < keep
            dropped = np.where(mask, v / keep, 0.0)
        scores = score_vector(head, dropped)
        rows[i] = scores
        labels.append(head.label_order[int(np.argmax(scores))])
    return McSamples(labels=labels, score_matrix=rows)


def uncertainty(sample_labels: Sequence[str], m: int) -> UncertaintyVerdict:
    """Distinct-count verdict: 1 -> certain, <= ceil(M/2) -> uncertain, else unstable."""
    if len(sample_labels) != m:
        raise ValueError(f"expected {m} samples, got {len(sample_labels)}")
    distinct = len(set(sample_labels))
    if distinct == 1:
        verdict = "certain"
    elif distinct <= math.ceil(m / 2):
        verdict = "uncertain"
    else:
        verdict = "unstable"
    return UncertaintyVerdict(verdict=verdict, distinct_count=distinct)
