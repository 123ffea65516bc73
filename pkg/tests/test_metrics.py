import numpy as np
import pytest

from slidedistill.errors import UndefinedMetricError
from slidedistill.metrics import acc_f1, auc, compute_metrics


def auc_pairwise_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            total += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return total / (len(pos) * len(neg))


def confusion_oracle(scores, labels, thr=0.5):
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        pred = 1 if s >= thr else 0
        if pred and y:
            tp += 1
        elif pred and not y:
            fp += 1
        elif not pred and y:
            fn += 1
        else:
            tn += 1
    acc = (tp + tn) / len(labels)
    # integer-count form of 2PR/(P+R); avoids intermediate rounding
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return acc, f1


def test_auc_perfect_separation():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auc_all_ties_is_half():
    assert auc([0.3] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.9], [1, 1])


def test_auc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n = int(rng.integers(5, 120))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        got = auc(scores, labels)
        assert got == pytest.approx(auc_pairwise_oracle(scores, labels), abs=1e-12)


def test_auc_invariant_under_strictly_increasing_transforms():
    rng = np.random.default_rng(1)
    scores = rng.standard_normal(50)
    labels = rng.integers(0, 2, 50)
    labels[:2] = [0, 1]
    base = auc(scores, labels)
    assert auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
    assert auc(3.0 * scores + 11.0, labels) == pytest.approx(base, abs=1e-12)


def test_auc_complement_under_negation_without_ties():
    rng = np.random.default_rng(2)
    scores = rng.permutation(60) / 60.0  # all distinct
    labels = rng.integers(0, 2, 60)
    labels[:2] = [0, 1]
    assert auc(scores, labels) + auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


def test_acc_f1_perfect():
    acc, f1 = acc_f1([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert acc == 1.0 and f1 == 1.0


def test_acc_f1_all_negative_predictions():
    acc, f1 = acc_f1([0.1, 0.2, 0.3], [1, 0, 1])
    assert f1 == 0.0
    assert acc == pytest.approx(1.0 / 3.0)


def test_acc_f1_matches_confusion_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(4, 80))
        scores = rng.random(n)
        labels = rng.integers(0, 2, n)
        got = acc_f1(scores, labels)
        assert got == confusion_oracle(scores, labels)


def test_compute_metrics_single_class_reports_null_auc():
    m = compute_metrics([0.2, 0.7], [1, 1])
    assert m.auc is None
    assert m.n_pos == 2 and m.n_neg == 0
