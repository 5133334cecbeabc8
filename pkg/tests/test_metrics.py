import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnfuse import metrics
from oracles import ap_enumerate, fpr95_enumerate, zncc_loops


def rand_pair(seed, shape=(16, 16)):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape), rng.standard_normal(shape)


# --- zncc --------------------------------------------------------------------

def test_zncc_self_correlation():
    x, _ = rand_pair(0)
    assert metrics.zncc(x, x) == pytest.approx(1.0, abs=1e-9)


def test_zncc_affine_invariance():
    x, _ = rand_pair(1)
    assert abs(metrics.zncc(x, 2.0 * x + 3.0) - 1.0) < 1e-6
    assert abs(metrics.zncc(x, -0.5 * x + 1.0) + 1.0) < 1e-6


def test_zncc_matches_double_loop_oracle():
    for seed in range(10):
        x, y = rand_pair(seed, (16, 16))
        assert metrics.zncc(x, y) == pytest.approx(zncc_loops(x, y), abs=1e-6)


def test_zncc_symmetry_and_bound():
    x, y = rand_pair(11)
    assert metrics.zncc(x, y) == pytest.approx(metrics.zncc(y, x), abs=1e-12)
    assert abs(metrics.zncc(x, y)) <= 1 + 1e-9


def test_zncc_degenerate_constant_map():
    x, _ = rand_pair(12)
    value, degenerate = metrics.zncc_flagged(np.full((4, 4), 2.0), x[:4, :4])
    assert value == 0.0 and degenerate
    value, degenerate = metrics.zncc_flagged(x[:4, :4], x[:4, :4])
    assert not degenerate


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(-3.0, 3.0), st.integers(0, 10_000))
def test_zncc_positive_affine_property(a, b, seed):
    x, y = rand_pair(seed, (8, 8))
    assert metrics.zncc(a * x + b, y) == pytest.approx(metrics.zncc(x, y), abs=1e-6)


# --- misclassification labels -------------------------------------------------

def test_labels_perfect_and_all_wrong():
    probs = np.zeros((3, 2, 2), np.float32)
    probs[1] = 1.0
    gt = np.ones((2, 2), np.int64)
    assert metrics.misclassification_labels(probs, gt).sum() == 0
    assert metrics.misclassification_labels(probs, gt * 0).sum() == 4


def test_labels_tie_breaks_to_lowest_class():
    probs = np.zeros((2, 1, 1), np.float32) + 0.5
    gt = np.ones((1, 1), np.int64)
    assert metrics.misclassification_labels(probs, gt)[0, 0] == 1  # argmax -> class 0


# --- average precision ---------------------------------------------------------

def test_ap_perfect_ranking():
    assert metrics.average_precision([0.9, 0.1], [1, 0]) == pytest.approx(1.0)


def test_ap_worst_ranking_two_points():
    assert metrics.average_precision([0.9, 0.1], [0, 1]) == pytest.approx(0.5)


def test_ap_matches_enumeration_oracle():
    rng = np.random.default_rng(3)
    for trial in range(60):
        n = int(rng.integers(2, 33))
        scores = np.round(rng.random(n), 2)  # exercises ties
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            continue
        got = metrics.average_precision(scores, labels)
        assert got == pytest.approx(ap_enumerate(scores, labels), abs=1e-9)


def test_ap_all_tied_equals_prevalence():
    labels = np.array([1, 0, 0, 1, 0])
    got = metrics.average_precision(np.ones(5), labels)
    assert got == pytest.approx(labels.mean())


def test_ap_success_polarity():
    # low score = success; ranking by -score is perfect
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    labels = np.array([1, 1, 0, 0])
    assert metrics.average_precision(scores, labels, "success") == pytest.approx(1.0)


def test_ap_single_class_error():
    with pytest.raises(metrics.MetricError):
        metrics.average_precision([0.5, 0.6], [1, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(20)
    labels = rng.integers(0, 2, 20)
    if labels.sum() in (0, 20):
        return
    base = metrics.average_precision(scores, labels)
    warped = metrics.average_precision(np.exp(3 * scores) + 1, labels)
    assert warped == pytest.approx(base, abs=1e-12)


# --- fpr at 95% tpr -------------------------------------------------------------

def test_fpr95_perfect_separation():
    scores = np.concatenate([np.linspace(0.6, 1.0, 20), np.linspace(0.0, 0.4, 20)])
    labels = np.concatenate([np.ones(20), np.zeros(20)])
    assert metrics.fpr_at_95_tpr(scores, labels) == 0.0


def test_fpr95_worked_example():
    assert metrics.fpr_at_95_tpr([0.9, 0.8, 0.7, 0.2], [1, 1, 0, 0]) == 0.0


def test_fpr95_all_equal_scores():
    assert metrics.fpr_at_95_tpr(np.ones(6), [1, 1, 1, 0, 0, 0]) == 1.0


def test_fpr95_matches_enumeration_oracle():
    rng = np.random.default_rng(4)
    for trial in range(60):
        n = int(rng.integers(4, 33))
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            continue
        got = metrics.fpr_at_95_tpr(scores, labels)
        assert got == pytest.approx(fpr95_enumerate(scores, labels), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_fpr95_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(24)
    labels = rng.integers(0, 2, 24)
    if labels.sum() in (0, 24):
        return
    base = metrics.fpr_at_95_tpr(scores, labels)
    warped = metrics.fpr_at_95_tpr(2 * scores ** 3 - 1, labels)
    assert warped == pytest.approx(base, abs=1e-12)


def test_perfect_separation_ap_and_fpr():
    scores = np.concatenate([np.full(10, 0.9), np.full(30, 0.1)])
    labels = np.concatenate([np.ones(10), np.zeros(30)])
    assert metrics.average_precision(scores, labels) == pytest.approx(1.0)
    assert metrics.fpr_at_95_tpr(scores, labels) == 0.0
