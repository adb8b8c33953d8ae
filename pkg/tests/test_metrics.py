import numpy as np
import pytest

from polsarnet.metrics import ConfusionMatrix, format_key_values, format_report, summarize


def reference_stats(counts):
    """Straight-from-the-definitions reimplementation used as an oracle."""
    counts = np.asarray(counts, dtype=np.float64)
    c = counts.shape[0]
    n = counts.sum()
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    oa = np.trace(counts) / n
    aa = np.mean([counts[i, i] / row[i] for i in range(c)])
    pe = float((row * col).sum()) / (n * n)
    kappa = (oa - pe) / (1.0 - pe)
    f1s = []
    for i in range(c):
        tp = counts[i, i]
        denom = 2 * tp + (col[i] - tp) + (row[i] - tp)
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return oa, aa, kappa, float(np.mean(f1s) ** 2), float(np.mean(f1s))


def test_worked_example_exact():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [2, 4]]
    assert cm.overall_accuracy() == 0.70
    assert abs(cm.average_accuracy() - (0.75 + 4 / 6) / 2) < 1e-15
    assert cm.kappa() == 0.40
    # per-class F1: 6/9 and 8/11; headline score is the squared mean
    mean_f1 = (6 / 9 + 8 / 11) / 2
    assert abs(cm.f1_macro() - mean_f1) < 1e-15
    assert abs(cm.f1() - mean_f1**2) < 1e-15
    assert abs(cm.f1() - 0.4858) < 5e-5


def test_matches_independent_reimplementation():
    rng = np.random.default_rng(0)
    for _ in range(300):
        c = int(rng.integers(2, 16))
        counts = rng.integers(0, 20, size=(c, c)) + np.eye(c, dtype=np.int64)
        cm = ConfusionMatrix(c)
        cm.counts[:] = counts
        oa, aa, kappa, f1, f1m = reference_stats(counts)
        assert abs(cm.overall_accuracy() - oa) < 1e-12
        assert abs(cm.average_accuracy() - aa) < 1e-12
        assert abs(cm.kappa() - kappa) < 1e-12
        assert abs(cm.f1() - f1) < 1e-12
        assert abs(cm.f1_macro() - f1m) < 1e-12


def test_matches_sklearn():
    from sklearn.metrics import cohen_kappa_score, f1_score

    rng = np.random.default_rng(1)
    for _ in range(20):
        c = int(rng.integers(2, 8))
        y_true = rng.integers(1, c + 1, size=500)
        y_pred = np.where(rng.random(500) < 0.7, y_true, rng.integers(1, c + 1, size=500))
        if len(np.unique(y_true)) < c or len(np.unique(y_pred)) < c:
            continue
        cm = ConfusionMatrix.from_predictions(y_true, y_pred, c)
        assert abs(cm.kappa() - cohen_kappa_score(y_true, y_pred)) < 1e-12
        assert abs(cm.f1_macro() - f1_score(y_true, y_pred, average="macro")) < 1e-12
        assert abs(cm.overall_accuracy() - np.mean(y_true == y_pred)) < 1e-12


def test_class_permutation_invariance():
    rng = np.random.default_rng(2)
    c = 5
    counts = rng.integers(1, 30, size=(c, c))
    cm = ConfusionMatrix(c)
    cm.counts[:] = counts
    perm = rng.permutation(c)
    cm2 = ConfusionMatrix(c)
    cm2.counts[:] = counts[np.ix_(perm, perm)]
    assert abs(cm.overall_accuracy() - cm2.overall_accuracy()) < 1e-15
    assert abs(cm.average_accuracy() - cm2.average_accuracy()) < 1e-15
    assert abs(cm.kappa() - cm2.kappa()) < 1e-15
    assert np.allclose(np.sort(cm.f1_per_class()), np.sort(cm2.f1_per_class()))


def test_random_predictions_give_near_zero_kappa():
    rng = np.random.default_rng(3)
    y_true = rng.integers(1, 5, size=200000)
    y_pred = rng.integers(1, 5, size=200000)
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, 4)
    assert abs(cm.kappa()) < 0.01


def test_accumulate_and_merge():
    a = ConfusionMatrix.from_predictions([1, 2, 2], [1, 2, 1], 2)
    b = ConfusionMatrix.from_predictions([1, 1], [2, 1], 2)
    merged = a + b
    assert merged.total == 5
    assert np.array_equal(merged.counts, [[2, 1], [1, 1]])
    with pytest.raises(ValueError):
        a.merge(ConfusionMatrix(3))


def test_label_id_validation():
    cm = ConfusionMatrix(3)
    with pytest.raises(ValueError):
        cm.accumulate([0], [1])  # 0 is the unlabeled sentinel
    with pytest.raises(ValueError):
        cm.accumulate([1], [4])
    with pytest.raises(ValueError):
        cm.accumulate([1, 2], [1])


def test_empty_reference_class_is_error():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [0, 0]]
    with pytest.raises(ValueError):
        cm.per_class_accuracy()


def test_absent_class_f1_warns_zero():
    cm = ConfusionMatrix(3)
    cm.counts[:] = [[5, 0, 0], [0, 5, 0], [0, 0, 0]]
    with pytest.warns(UserWarning):
        f1s = cm.f1_per_class()
    assert f1s[2] == 0.0
    assert f1s[0] == 1.0


def test_summarize_and_reports():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [2, 4]]
    stats = summarize(cm, ("water", "urban"))
    assert set(stats) == {"acc/water", "acc/urban", "aa", "oa", "kappa", "f1", "f1_macro"}
    report = format_report(cm, ("water", "urban"))
    lines = report.splitlines()
    # one accuracy column per class plus AA, OA, Kappa, F1
    assert lines[1].split() == ["water", "urban", "AA", "OA", "Kappa", "F1"]
    assert len(lines[2].split()) == 2 + 4
    assert "f1_macro" in lines[3] and "samples 10" in lines[3]
    kv = format_key_values(stats)
    assert "oa = 0.7" in kv
    assert kv.endswith("\n")


def test_summarize_name_count_mismatch():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[1, 0], [0, 1]]
    with pytest.raises(ValueError):
        summarize(cm, ("only_one",))
