from __future__ import annotations

import math

import numpy as np
import pytest

from intentgate.classifier import (
    HeadModel,
    McConfig,
    TrainConfig,
    TrainingDivergedError,
    bce_loss_and_grad,
    mc_sample,
    predict,
    score_vector,
    train_head,
    training_matrix,
    uncertainty,
)
from intentgate.embedding import HashingEmbedder


def _separable_clusters(n_per: int = 20, dim: int = 16, seed: int = 0):
    """Two tight clusters on orthogonal axes; trivially separable."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label_idx, axis in enumerate((0, 1)):
        for _ in range(n_per):
            v = rng.normal(scale=0.05, size=dim)
            v[axis] += 1.0
            xs.append(v / np.linalg.norm(v))
            target = np.zeros(2)
            target[label_idx] = 1.0
            ys.append(target)
    return np.array(xs), np.array(ys)


def test_separable_clusters_reach_perfect_training_accuracy():
    x, y = _separable_clusters()
    head = train_head(x, y, ["left", "right"], TrainConfig(learning_rate=0.5, epochs=60, batch_size=8, seed=0))
    correct = 0
    for row, target in zip(x, y):
        _, labels = predict(head, row)
        correct += labels == frozenset(np.array(["left", "right"])[target.astype(bool)])
    assert correct == len(x)


def test_all_zero_targets_push_every_score_below_half():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 8))
    y = np.zeros((40, 3))
    head = train_head(x, y, ["a", "b", "c"], TrainConfig(learning_rate=0.5, epochs=30, seed=1))
    for row in x:
        scores, labels = predict(head, row)
        assert labels == frozenset()
        assert all(s < 0.5 for s in scores.values())


def test_training_is_deterministic_per_seed():
    x, y = _separable_clusters()
    cfg = TrainConfig(learning_rate=0.1, epochs=5, seed=7)
    first = train_head(x, y, ["l", "r"], cfg)
    second = train_head(x, y, ["l", "r"], cfg)
    assert np.array_equal(first.weights, second.weights)
    assert np.array_equal(first.bias, second.bias)


def test_loss_decreases_from_first_to_final_epoch():
    x, y = _separable_clusters()
    head = train_head(x, y, ["l", "r"], TrainConfig(learning_rate=0.2, epochs=15, seed=3))
    assert head.epoch_losses[-1] <= head.epoch_losses[0]


def test_divergence_is_reported_not_silent():
    x = np.full((4, 3), 1e154)
    y = np.ones((4, 2))
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        train_head(x, y, ["a", "b"], TrainConfig(learning_rate=1e160, epochs=2, seed=0))


def test_shape_mismatches_are_rejected():
    with pytest.raises(ValueError):
        train_head(np.zeros((3, 2)), np.zeros((4, 1)), ["a"], TrainConfig())
    with pytest.raises(ValueError):
        train_head(np.zeros((3, 2)), np.zeros((3, 2)), ["a"], TrainConfig())


def test_zero_head_scores_half_and_keeps_all_labels_at_threshold():
    head = HeadModel(weights=np.zeros((4, 3)), bias=np.zeros(3), label_order=["a", "b", "c"])
    scores, labels = predict(head, np.ones(4))
    assert all(s == pytest.approx(0.5) for s in scores.values())
    assert labels == frozenset({"a", "b", "c"})  # threshold is inclusive


def test_saturated_logit_scores_near_one():
    head = HeadModel(weights=np.full((2, 1), 50.0), bias=np.zeros(1), label_order=["a"])
    scores, _ = predict(head, np.ones(2))
    assert scores["a"] == pytest.approx(1.0)


def test_hand_computed_scores_and_decision():
    # logits: 0.0 for l1, -4.0 for l2
    head = HeadModel(
        weights=np.array([[0.0, -4.0]]), bias=np.zeros(2), label_order=["l1", "l2"]
    )
    scores, labels = predict(head, np.array([1.0]))
    assert labels == frozenset({"l1"})
    assert scores["l1"] == pytest.approx(0.5)
    assert scores["l2"] == pytest.approx(0.0180, abs=1e-4)


def test_predict_rejects_dim_mismatch():
    head = HeadModel(weights=np.zeros((4, 2)), bias=np.zeros(2), label_order=["a", "b"])
    with pytest.raises(ValueError):
        predict(head, np.ones(5))


def test_gradient_matches_central_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n, dim, c = rng.integers(2, 6), rng.integers(2, 5), rng.integers(1, 4)
        x = rng.normal(size=(n, dim))
        y = (rng.random(size=(n, c)) < 0.4).astype(float)
        w = rng.normal(size=(dim, c))
        b = rng.normal(size=c)
        _, grad_w, grad_b = bce_loss_and_grad(w, b, x, y, l2=1e-3)
        h = 1e-6

        def loss_at(wp, bp):
            return bce_loss_and_grad(wp, bp, x, y, l2=1e-3)[0]

        fd_w = np.zeros_like(w)
        for i in range(dim):
            for j in range(c):
                up, down = w.copy(), w.copy()
                up[i, j] += h
                down[i, j] -= h
                fd_w[i, j] = (loss_at(up, b) - loss_at(down, b)) / (2 * h)
        fd_b = np.zeros_like(b)
        for j in range(c):
            up, down = b.copy(), b.copy()
            up[j] += h
            down[j] -= h
            fd_b[j] = (loss_at(w, up) - loss_at(w, down)) / (2 * h)

        rel_w = np.linalg.norm(grad_w - fd_w) / max(np.linalg.norm(grad_w), np.linalg.norm(fd_w))
        rel_b = np.linalg.norm(grad_b - fd_b) / max(np.linalg.norm(grad_b), np.linalg.norm(fd_b))
        assert rel_w < 1e-5 and rel_b < 1e-5


def test_scaling_a_winning_positive_logit_keeps_the_argmax():
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 25:
        w = rng.normal(size=(6, 4))
        v = rng.normal(size=6)
        logits = v @ w
        winner = int(np.argmax(logits))
        if logits[winner] <= 0:
            continue
        scaled = w.copy()
        scaled[:, winner] *= 1.0 + float(rng.random()) * 4.0
        assert int(np.argmax(v @ scaled)) == winner
        checked += 1


def test_mc_with_zero_dropout_equals_deterministic_argmax():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(8, 3))
    head = HeadModel(weights=w, bias=np.zeros(3), label_order=["a", "b", "c"])
    v = rng.normal(size=8)
    det = head.label_order[int(np.argmax(score_vector(head, v)))]
    samples = mc_sample(head, v, McConfig(samples=12, dropout_p=0.0, seed=0))
    assert samples.labels == [det] * 12


def test_single_sample_always_has_one_distinct_label():
    head = HeadModel(weights=np.ones((4, 2)), bias=np.zeros(2), label_order=["a", "b"])
    samples = mc_sample(head, np.ones(4), McConfig(samples=1, dropout_p=0.5, seed=3))
    assert uncertainty(samples.labels, 1).distinct_count == 1


def test_near_tied_labels_disagree_under_dropout():
    w = np.zeros((8, 2))
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    head = HeadModel(weights=w, bias=np.zeros(2), label_order=["l1", "l2"])
    v = np.zeros(8)
    v[0], v[1] = 1.0, 0.999  # margin far below the dropout perturbation
    samples = mc_sample(head, v, McConfig(samples=20, dropout_p=0.1, seed=1))
    assert uncertainty(samples.labels, 20).distinct_count >= 2


def test_mc_sampling_is_deterministic_per_seed():
    rng = np.random.default_rng(5)
    head = HeadModel(weights=rng.normal(size=(16, 4)), bias=np.zeros(4), label_order=list("abcd"))
    v = rng.normal(size=16)
    cfg = McConfig(samples=10, dropout_p=0.3, seed=11)
    assert mc_sample(head, v, cfg).labels == mc_sample(head, v, cfg).labels


def test_score_variance_diagnostic_is_exposed():
    rng = np.random.default_rng(6)
    head = HeadModel(weights=rng.normal(size=(8, 2)), bias=np.zeros(2), label_order=["a", "b"])
    samples = mc_sample(head, rng.normal(size=8), McConfig(samples=20, dropout_p=0.2, seed=0))
    assert samples.score_variance.shape == (2,)
    assert (samples.score_variance >= 0).all()


UNCERTAINTY_TABLE = {
    5: {1: "certain", 2: "uncertain", 3: "uncertain", 4: "unstable", 5: "unstable"},
    10: {1: "certain", **{d: "uncertain" for d in range(2, 6)}, **{d: "unstable" for d in range(6, 11)}},
    20: {1: "certain", **{d: "uncertain" for d in range(2, 11)}, **{d: "unstable" for d in range(11, 21)}},
}


@pytest.mark.parametrize("m", [5, 10, 20])
def test_uncertainty_rule_is_exhaustively_correct(m):
    for distinct, expected in UNCERTAINTY_TABLE[m].items():
        labels = [f"label_{i}" for i in range(distinct)] + ["label_0"] * (m - distinct)
        verdict = uncertainty(labels, m)
        assert verdict.verdict == expected, (m, distinct)
        assert verdict.distinct_count == distinct
    assert math.ceil(m / 2) == max(d for d, v in UNCERTAINTY_TABLE[m].items() if v == "uncertain")


def test_uncertainty_rejects_wrong_sample_count():
    with pytest.raises(ValueError):
        uncertainty(["a"] * 3, 5)


def test_training_matrix_multihot_and_augmented_zero_rows(toy_dataset):
    from dataclasses import replace

    from intentgate.domain import Origin
    from conftest import make_utterance

    ds = replace(
        toy_dataset,
        train=toy_dataset.train + (make_utterance("QZWXK noise", origin=Origin.AUGMENTED),),
    )
    x, y, label_order = training_matrix(ds, HashingEmbedder(64))
    assert x.shape == (len(ds.train), 64)
    assert y.shape == (len(ds.train), 3)
    assert y[-1].sum() == 0  # augmented row
    multi = [i for i, u in enumerate(ds.train) if len(u.gold_labels) == 2]
    assert y[multi[0]].sum() == 2


def test_head_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    head = HeadModel(
        weights=rng.normal(size=(8, 3)),
        bias=rng.normal(size=3),
        label_order=["a", "b", "c"],
        threshold=0.35,
    )
    head.save(tmp_path / "head")
    loaded = HeadModel.load(tmp_path / "head")
    assert np.array_equal(loaded.weights, head.weights)
    assert np.array_equal(loaded.bias, head.bias)
    assert loaded.label_order == head.label_order
    assert loaded.threshold == head.threshold


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        McConfig(samples=0)
    with pytest.raises(ValueError):
        McConfig(dropout_p=1.0)
