from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import toy_encoder_config
from simtriplet.evaluation import (
    ConfusionMatrix,
    EvalReport,
    EvaluationError,
    LabeledSet,
    LinearHead,
    ProbeConfig,
    SupervisedConfig,
    balanced_accuracy,
    embedding_std_of,
    ensemble_predict,
    kfold_split,
    linear_probe_train,
    macro_f1,
    subset_fraction,
    supervised_baseline_train,
    train_linear_head,
)


def sklearn_style_metrics(y_true, y_pred, k):
    """Per-sample reimplementation: recall/precision from boolean masks."""
    recalls, f1s = [], []
    for c in range(k):
        t = y_true == c
        if not t.any():
            continue
        p = y_pred == c
        tp = int((t & p).sum())
        rec = Fraction(tp, int(t.sum()))
        prec = Fraction(tp, int(p.sum())) if p.any() else Fraction(0)
        recalls.append(rec)
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else Fraction(0))
    return float(sum(recalls) / len(recalls)), float(sum(f1s) / len(f1s))


def test_worked_example():
    cm = ConfusionMatrix([[1, 1], [0, 2]])
    assert balanced_accuracy(cm) == 0.75
    assert macro_f1(cm) == float(Fraction(11, 15))


def test_perfect_and_empty():
    assert balanced_accuracy(np.eye(3, dtype=int) * 4) == 1.0
    with pytest.raises(EvaluationError):
        balanced_accuracy(np.zeros((2, 2), int))


def test_zero_support_class_is_excluded():
    cm = [[2, 0, 0], [0, 1, 1], [0, 0, 0]]
    assert balanced_accuracy(cm) == 0.75


def test_never_predicted_class_has_zero_f1():
    cm = [[0, 3], [0, 3]]
    assert macro_f1(cm) == pytest.approx((0 + 2 * 0.5 * 1 / 1.5) / 2)


def test_invalid_confusion_matrix():
    with pytest.raises(ValueError, match="square"):
        ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="non-negative"):
        ConfusionMatrix([[1, -1], [0, 1]])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.data())
def test_metrics_match_per_sample_oracle(k, data):
    y_true = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=1, max_size=60)))
    y_pred = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=len(y_true), max_size=len(y_true))))
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, k)
    ba, mf = sklearn_style_metrics(y_true, y_pred, k)
    assert balanced_accuracy(cm) == ba
    assert macro_f1(cm) == mf


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.int64, (4, 4), elements=st.integers(0, 20)))
def test_metrics_in_unit_interval_and_permutation_invariant(counts):
    if counts.sum(axis=1).max() == 0:
        return
    perm = np.array([2, 0, 3, 1])
    permuted = counts[perm][:, perm]
    for f in (balanced_accuracy, macro_f1):
        assert 0.0 <= f(counts) <= 1.0
        assert f(counts) == f(permuted)


def test_report_csv_round_trip():
    rep = EvalReport.from_predictions([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3)
    back = EvalReport.from_csv(rep.to_csv())
    assert back == rep
    assert rep.to_csv().startswith("true\\pred,0,1,2\n0,1,1,0\n")


def test_kfold_stratified_covers_everything():
    labels = np.repeat([0, 1, 2], [10, 7, 5])
    folds = kfold_split(labels, 5, seed=0)
    assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(labels.size))
    for f in folds:
        assert set(labels[f].tolist()) == {0, 1, 2}


def test_kfold_grouped_one_group_per_fold():
    groups = np.repeat([3, 1, 2], 4)
    folds = kfold_split(np.zeros(12), 3, groups=groups)
    assert [sorted(set(groups[f].tolist())) for f in folds] == [[1], [2], [3]]
    with pytest.raises(EvaluationError, match="exactly 5 groups"):
        kfold_split(np.zeros(12), 5, groups=groups)


def test_kfold_rejects_tiny_class():
    with pytest.raises(EvaluationError, match="class 1"):
        kfold_split([0] * 10 + [1] * 3, 5)


def test_subset_fraction_balanced():
    labels = np.repeat(np.arange(8), 100)
    idx = subset_fraction(labels, 0.25, seed=1)
    assert np.array_equal(np.bincount(labels[idx]), np.full(8, 25))
    assert np.array_equal(subset_fraction(labels, 1.0), np.arange(800))


def test_subset_fraction_too_small():
    with pytest.raises(EvaluationError):
        subset_fraction(np.repeat(np.arange(4), 10), 0.01)


def test_embedding_std_extremes():
    collapsed = np.tile([[1.0, 2.0, 3.0]], (10, 1))
    assert embedding_std_of(collapsed) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    iso = rng.standard_normal((20000, 64))
    assert embedding_std_of(iso) == pytest.approx(1 / np.sqrt(64), rel=0.02)


def _blobs(n_per, d, k, seed, spread=0.3):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((k, d)) * 3
    x = np.concatenate([centers[c] + spread * rng.standard_normal((n_per, d)) for c in range(k)])
    return x.astype(np.float32), np.repeat(np.arange(k), n_per)


def test_linear_head_separates_blobs():
    x, y = _blobs(40, 6, 3, 0)
    head, score = train_linear_head(x, y, x, y, 3, ProbeConfig(epochs=10))
    assert score == 1.0
    assert isinstance(head, LinearHead) and head.weight.shape == (6, 3)


def test_standardization_folded_into_head():
    x, y = _blobs(30, 4, 2, 1)
    x = x * 1000 + 5000
    head, _ = train_linear_head(x, y, x, y, 2, ProbeConfig(epochs=5))
    assert (head.probabilities(x).argmax(1) == y).mean() == 1.0


def test_probe_uses_given_features_and_folds():
    x, y = _blobs(20, 5, 2, 2)
    data = LabeledSet(np.zeros((40, 3, 8, 8), np.float32), y)
    res = linear_probe_train(None, data, ProbeConfig(epochs=5), folds=5, seed=0, features=x)
    assert len(res.heads) == 5 and min(res.val_scores) == 1.0
    probs, pred = ensemble_predict(res.heads, x)
    np.testing.assert_allclose(probs.sum(1), 1, rtol=1e-5)
    assert (pred == y).all()


def test_ensemble_rejects_class_mismatch():
    a = LinearHead(np.zeros((2, 2)), np.zeros(2))
    b = LinearHead(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(EvaluationError):
        ensemble_predict([a, b], np.zeros((1, 2)))


def test_grouped_fold_missing_class_falls_back():
    labels = np.array([0, 0, 1, 1, 0, 0, 1, 1, 2, 2] * 2)
    groups = np.array([0] * 8 + [1] * 2 + [0] * 8 + [1] * 2)
    x = np.eye(3, dtype=np.float32)[labels]
    data = LabeledSet(np.zeros((20, 3, 4, 4), np.float32), labels, groups)
    res = linear_probe_train(None, data, ProbeConfig(epochs=2), folds=2, seed=0, features=x)
    for val in res.folds:
        train = np.setdiff1d(np.arange(20), val)
        assert set(labels[train].tolist()) == {0, 1, 2}


def test_supervised_baseline_runs():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 10)
    images = rng.standard_normal((20, 3, 8, 8)).astype(np.float32) + y[:, None, None, None] * 2
    data = LabeledSet(images, y)
    models, scores = supervised_baseline_train(data, SupervisedConfig(epochs=3, encoder=toy_encoder_config()),
                                               folds=2, seed=0)
    assert len(models) == 2 and all(0 <= s <= 1 for s in scores)
