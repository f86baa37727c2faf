import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moehealth.errors import ShapeError, UndefinedMetricError
from moehealth.metrics import auroc, auroc_or_none, f1


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == pytest.approx(0.75)
    assert auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_auroc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    assert auroc_or_none([0.1, 0.2], [0, 0]) is None


def test_auroc_input_validation():
    with pytest.raises(ShapeError):
        auroc([0.1, 0.2], [1])
    with pytest.raises(ShapeError):
        auroc([], [])
    with pytest.raises(ShapeError):
        auroc([0.1, 0.2], [1, 2])


def test_auroc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 3)))  # coarse rounding forces ties
        assert abs(auroc(scores, labels) - brute_auroc(scores, labels)) < 1e-12


scores_labels = st.integers(2, 60).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 100).map(lambda v: v / 100), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda ys: 0 < sum(ys) < len(ys)),
    )
)


@given(scores_labels)
def test_auroc_monotone_transform_invariant(data):
    s, y = np.array(data[0]), np.array(data[1])
    assert auroc(s, y) == pytest.approx(auroc(np.exp(3 * s) - 7, y), abs=1e-12)


@given(scores_labels)
def test_auroc_label_flip_complement(data):
    s, y = np.array(data[0]), np.array(data[1])
    if len(set(s.tolist())) == s.size:
        assert auroc(s, y) + auroc(s, 1 - y) == pytest.approx(1.0, abs=1e-12)


def test_f1_examples():
    assert f1([0.9, 0.1, 0.7], [1, 0, 1]) == 1.0
    # predicted positives {a, b}; true positives {a, c}
    assert f1([0.9, 0.8, 0.2, 0.1], [1, 0, 1, 0]) == pytest.approx(0.5)
    assert f1([0.1, 0.2], [0, 0]) == 0.0
    assert f1([0.5], [1]) == 1.0  # threshold is inclusive


@given(scores_labels, st.randoms(use_true_random=False))
def test_f1_order_invariant(data, r):
    s, y = np.array(data[0]), np.array(data[1])
    perm = list(range(s.size))
    r.shuffle(perm)
    assert f1(s, y) == f1(s[perm], y[perm])
