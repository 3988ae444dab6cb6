import math

import numpy as np
import pytest

from conftest import make_image_manifest
from xens.config import RAW_LABELS, AugmentationConfig
from xens.errors import DataError
from xens.evaluation import (
    aggregate_folds,
    build_report,
    classification_metrics,
    confusion_matrix,
    evaluate_model,
    mean_ppv,
    ppv_true_class,
    read_report,
    write_report,
)

CLASSES = ("normal", "pneumonia", "covid19")


def _one_hot(preds, k=3):
    probs = np.full((len(preds), k), 0.1 / (k - 1))
    probs[np.arange(len(preds)), preds] = 0.9
    return probs


def _report(preds, labels, model_id="A"):
    ids = [f"img{i:03d}" for i in range(len(labels))]
    return build_report(_one_hot(preds), labels, CLASSES, model_id, "test", ids)


def test_confusion_matrix_example():
    cm = confusion_matrix([0, 0, 1, 1, 1, 1, 2], [0, 0, 0, 1, 1, 1, 2], 3)
    assert cm.tolist() == [[2, 1, 0], [0, 3, 0], [0, 0, 1]]


def test_confusion_matrix_matches_brute_force():
    rng = np.random.default_rng(0)
    preds, labels = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    cm = confusion_matrix(preds, labels, 4)
    for i in range(4):
        for j in range(4):
            assert cm[i, j] == sum(1 for p, t in zip(preds, labels) if t == i and p == j)
    assert cm.sum() == 200


def _brute_force_metrics(preds, labels, k):
    per_class = []
    for c in range(k):
        tp = sum(1 for p, t in zip(preds, labels) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, labels) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, labels) if p != c and t == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append((precision, recall, f1))
    n = len(labels)
    correct = sum(1 for p, t in zip(preds, labels) if p == t)
    pk = [sum(1 for p in preds if p == c) for c in range(k)]
    tk = [sum(1 for t in labels if t == c) for c in range(k)]
    num = correct * n - sum(a * b for a, b in zip(pk, tk))
    den = math.sqrt((n * n - sum(a * a for a in pk)) * (n * n - sum(b * b for b in tk)))
    return per_class, correct / n, (num / den if den else 0.0)


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(11)
    for trial in range(1000):
        n = int(rng.integers(1, 40))
        preds, labels = rng.integers(0, 3, n).tolist(), rng.integers(0, 3, n).tolist()
        m = classification_metrics(confusion_matrix(preds, labels, 3))
        per_class, accuracy, mcc = _brute_force_metrics(preds, labels, 3)
        assert abs(m.accuracy - accuracy) <= 1e-12, f"trial {trial}: accuracy"
        assert abs(m.mcc - mcc) <= 1e-12, f"trial {trial}: mcc {m.mcc} vs {mcc}"
        for ours, (p, r, f) in zip(m.per_class, per_class):
            assert abs(ours.precision - p) <= 1e-12 and abs(ours.recall - r) <= 1e-12
            assert abs(ours.f1 - f) <= 1e-12, f"trial {trial}: f1"


def test_confusion_matrix_out_of_range():
    with pytest.raises(DataError):
        confusion_matrix([0, 3], [0, 1], 3)


def test_metrics_worked_example():
    m = classification_metrics(np.array([[2, 1, 0], [0, 3, 0], [0, 0, 1]]))
    assert m.accuracy == pytest.approx(6 / 7)
    assert m.mcc == pytest.approx(23 / math.sqrt(840), abs=1e-12)
    assert m.mcc == pytest.approx(0.7936, abs=1e-4)
    normal, pneumonia, covid = m.per_class
    assert (normal.precision, normal.recall) == (1.0, pytest.approx(2 / 3))
    assert pneumonia.precision == pytest.approx(0.75) and pneumonia.recall == 1.0
    assert covid.f1 == 1.0


def test_metrics_perfect_and_single_column():
    assert classification_metrics(np.diag([5, 4, 3])).mcc == pytest.approx(1.0)
    m = classification_metrics(np.array([[3, 0, 0], [2, 0, 0], [2, 0, 0]]))
    assert m.mcc == 0.0
    assert m.per_class[1].precision == 0.0 and m.per_class[1].f1 == 0.0


def test_mcc_invariant_under_class_permutation():
    rng = np.random.default_rng(5)
    preds, labels = rng.integers(0, 3, 100), rng.integers(0, 3, 100)
    perm = np.array([2, 0, 1])
    a = classification_metrics(confusion_matrix(preds, labels, 3)).mcc
    b = classification_metrics(confusion_matrix(perm[preds], perm[labels], 3)).mcc
    assert a == pytest.approx(b, abs=1e-12)


def test_metrics_reject_bad_matrix():
    with pytest.raises(DataError):
        classification_metrics(np.zeros((3, 3)))
    with pytest.raises(DataError):
        classification_metrics(np.zeros((2, 3)))


def test_ppv_true_class():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    assert ppv_true_class(probs, [0, 1]).tolist() == pytest.approx([0.7, 0.1])
    with pytest.raises(DataError, match="sum to 1"):
        ppv_true_class(np.array([[0.5, 0.4, 0.0]]), [0])


def test_aggregate_folds_uses_sample_std():
    labels = [0, 0, 1, 1, 2, 2, 0, 1, 2, 0]
    reports = []
    for wrong in (0, 1, 0, 1, 0):
        preds = list(labels)
        for i in range(wrong):
            preds[i] = (preds[i] + 1) % 3
        reports.append(_report(preds, labels))
    agg = aggregate_folds(reports)
    accuracies = [r.accuracy for r in reports]
    mean, std = agg.metrics["accuracy"]
    assert mean == pytest.approx(np.mean(accuracies))
    assert std == pytest.approx(np.std(accuracies, ddof=1))
    assert std == pytest.approx(0.0548, abs=1e-4)
    assert agg.n_folds == 5 and "covid19.f1" in agg.metrics


def test_aggregate_needs_two_and_matching_classes():
    r = _report([0, 1, 2], [0, 1, 2])
    with pytest.raises(DataError):
        aggregate_folds([r])
    other = build_report(np.eye(2)[[0, 1]], [0, 1], ("normal", "diseased"), "A", "test", ["a", "b"])
    with pytest.raises(DataError, match="mismatched"):
        aggregate_folds([r, other])


def test_mean_ppv_over_folds():
    a = _report([0, 1, 2], [0, 1, 2])
    b = _report([1, 1, 2], [0, 1, 2])
    assert mean_ppv([a, b]).tolist() == pytest.approx([0.475, 0.9, 0.9])
    c = build_report(_one_hot([0, 1, 2]), [0, 1, 2], CLASSES, "A", "test", ["x", "y", "z"])
    with pytest.raises(DataError):
        mean_ppv([a, c])


def test_report_files(tmp_path):
    report = _report([0, 1, 1, 2], [0, 1, 2, 2])
    report.provenance = {"fold": 1}
    path = write_report(report, tmp_path)
    assert path.name == "A.report.yaml"
    assert (tmp_path / "A.ppv.tsv").is_file()
    back = read_report(tmp_path)
    assert back.confusion_matrix.tolist() == report.confusion_matrix.tolist()
    assert back.ppv.tolist() == report.ppv.tolist()
    assert back.image_ids == report.image_ids and back.labels == report.labels
    assert back.mcc == pytest.approx(report.mcc) and back.provenance == {"fold": 1}


def test_read_report_missing(tmp_path):
    with pytest.raises(DataError):
        read_report(tmp_path / "nope.report.yaml")


def test_evaluate_model_on_images(tmp_path, tiny_model64):
    manifest = make_image_manifest(tmp_path, {name: 3 for name in RAW_LABELS})
    cfg = AugmentationConfig(resize_to=16, crop_size=16)
    report = evaluate_model(tiny_model64, manifest, cfg, batch_size=4)
    assert report.confusion_matrix.sum() == 9
    assert report.ppv.shape == (9,) and ((report.ppv > 0) & (report.ppv < 1)).all()
    assert report.image_ids == tuple(manifest.ids())
    assert report.dataset_id == "scheme-D"


def test_evaluate_model_class_mismatch(tmp_path, tiny_model64):
    manifest = make_image_manifest(tmp_path, {"normal": 2, "diseased": 2})
    with pytest.raises(DataError, match="differ"):
        evaluate_model(tiny_model64, manifest, AugmentationConfig(resize_to=16, crop_size=16))
