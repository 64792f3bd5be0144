import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from socialmae.errors import DataError
from socialmae.metrics import (
    ConfusionMatrix,
    MetricsReport,
    ModeMetrics,
    f1_macro,
    f1_micro,
    per_class_f1,
    trait_accuracy,
)


def _tally_f1(truth, pred, k):
    """Per-sample TP/FP/FN tally, one class at a time."""
    scores = []
    for c in range(k):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    correct = sum(1 for t, p in zip(truth, pred) if t == p)
    return correct / len(truth), sum(scores) / k


def test_diagonal_is_perfect():
    cm = ConfusionMatrix(counts=[[3, 0, 0], [0, 4, 0], [0, 0, 2]])
    assert f1_micro(cm) == 1.0
    assert f1_macro(cm) == 1.0


def test_hand_computed_example():
    cm = ConfusionMatrix(counts=[[5, 5], [0, 10]])
    assert f1_micro(cm) == pytest.approx(0.75)
    assert per_class_f1(cm).tolist() == pytest.approx([10 / 15, 20 / 25])
    assert f1_macro(cm) == pytest.approx(0.73333, abs=1e-4)


def test_balanced_symmetric_errors_make_micro_equal_macro():
    cm = ConfusionMatrix(counts=[[8, 1, 1], [1, 8, 1], [1, 1, 8]])
    assert f1_macro(cm) == pytest.approx(f1_micro(cm))


def test_empty_matrix_is_an_error():
    with pytest.raises(DataError):
        f1_micro(ConfusionMatrix.zeros(3))
    with pytest.raises(DataError):
        f1_macro(ConfusionMatrix.zeros(3))


def test_uniform_guessing_is_chance():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 4, size=10000)
    pred = rng.integers(0, 4, size=10000)
    assert abs(f1_micro(ConfusionMatrix.from_predictions(truth, pred, 4)) - 0.25) < 0.02


def test_against_per_sample_tally():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(1, 30))
        truth = rng.integers(0, k, size=n).tolist()
        pred = rng.integers(0, k, size=n).tolist()
        cm = ConfusionMatrix.from_predictions(truth, pred, k)
        micro, macro = _tally_f1(truth, pred, k)
        assert f1_micro(cm) == micro
        assert f1_macro(cm) == pytest.approx(macro, abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=50))
def test_micro_is_accuracy(pairs):
    truth, pred = zip(*pairs)
    cm = ConfusionMatrix.from_predictions(truth, pred, 5)
    assert f1_micro(cm) == pytest.approx(np.trace(cm.array()) / cm.total)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40), st.permutations(range(4)))
def test_relabeling_classes_changes_nothing(pairs, perm):
    truth, pred = zip(*pairs)
    cm = ConfusionMatrix.from_predictions(truth, pred, 4)
    relabeled = ConfusionMatrix.from_predictions([perm[t] for t in truth], [perm[p] for p in pred], 4)
    assert f1_micro(relabeled) == pytest.approx(f1_micro(cm))
    assert f1_macro(relabeled) == pytest.approx(f1_macro(cm))


def test_merge_adds_counts():
    a = ConfusionMatrix(counts=[[1, 0], [2, 3]])
    b = ConfusionMatrix(counts=[[0, 4], [1, 1]])
    assert a.merge(b).counts == [[1, 4], [3, 4]]
    with pytest.raises(DataError):
        a.merge(ConfusionMatrix.zeros(3))


def test_confusion_matrix_is_square():
    with pytest.raises(ValueError):
        ConfusionMatrix(counts=[[1, 2], [3]])


def test_trait_accuracy():
    t = np.array([[0.2, 0.4, 0.6, 0.8, 0.5]])
    assert trait_accuracy(t, t).average == 1.0
    off = trait_accuracy(t + 0.1, t)
    assert off.per_trait == pytest.approx([0.9] * 5)
    assert off.average == pytest.approx(0.9)


def test_constant_guess_against_uniform_targets():
    targets = np.random.default_rng(2).uniform(0, 1, size=(20000, 5))
    acc = trait_accuracy(np.full_like(targets, 0.5), targets)
    assert acc.average == pytest.approx(0.75, abs=0.01)


def _tally_trait_accuracy(preds, targets):
    """One minus the mean absolute error, accumulated sample by sample for each trait."""
    n, traits = len(preds), len(preds[0])
    per_trait = []
    for j in range(traits):
        total = 0.0
        for i in range(n):
            total += abs(float(preds[i][j]) - float(targets[i][j]))
        per_trait.append(1.0 - total / n)
    return per_trait, sum(per_trait) / traits


def test_trait_accuracy_matches_a_per_sample_tally():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        preds, targets = rng.uniform(size=(n, 5)), rng.uniform(size=(n, 5))
        per_trait, average = _tally_trait_accuracy(preds.tolist(), targets.tolist())
        acc = trait_accuracy(preds, targets)
        assert acc.per_trait == pytest.approx(per_trait, rel=1e-12, abs=1e-12)
        assert acc.average == pytest.approx(average, rel=1e-12, abs=1e-12)


def test_trait_accuracy_rejects_bad_input():
    with pytest.raises(DataError):
        trait_accuracy(np.zeros((2, 5)), np.zeros((2, 4)))
    with pytest.raises(DataError):
        trait_accuracy(np.full((1, 5), 1.5), np.zeros((1, 5)))


def test_classification_table_has_a_column_pair_per_mode(tmp_path):
    report = MetricsReport(
        task="crema-d",
        modes=[
            ModeMetrics(mode="audio", samples=10, micro_f1=0.5, macro_f1=0.4),
            ModeMetrics(mode="video", samples=10, micro_f1=0.6, macro_f1=0.55),
            ModeMetrics(mode="av", samples=10, micro_f1=0.7, macro_f1=0.65),
        ],
    )
    table = report.table()
    for column in ("Audio Mi", "Audio Ma", "Visual Mi", "Visual Ma", "AV Mi", "AV Ma"):
        assert column in table
    assert "0.650" in table

    report.to_csv(tmp_path / "metrics.csv")
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "mode,samples,micro_f1,macro_f1"
