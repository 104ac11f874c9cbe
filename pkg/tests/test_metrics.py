import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokenfocus.errors import InputError
from tokenfocus.metrics import (
    MetricReport,
    accuracy,
    composite,
    fractional_ranks,
    per_image_accuracy,
    plcc,
    srcc,
)

from oracles import brute_pearson, brute_ranks, brute_spearman


def test_srcc_monotone_extremes():
    x = [0.1, 0.5, 0.7, 2.0, 9.0]
    assert srcc(x, [1, 2, 3, 4, 5]) == pytest.approx(1.0)
    assert srcc(x, [5, 4, 3, 2, 1]) == pytest.approx(-1.0)


def test_srcc_aligned_ties():
    assert srcc([1, 2, 2, 4], [10, 20, 20, 40]) == pytest.approx(1.0)


def test_fractional_ranks_average_ties():
    np.testing.assert_array_equal(fractional_ranks([3, 1, 3, 2, 3]), [4, 1, 4, 2, 4])


def test_srcc_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(2, 40))
        x = rng.integers(0, 6, size=n).astype(float)  # plenty of ties
        y = rng.normal(size=n)
        if np.ptp(x) == 0:
            continue
        assert srcc(x, y) == pytest.approx(brute_spearman(list(x), list(y)), abs=1e-12)


def test_correlation_errors():
    with pytest.raises(InputError):
        srcc([1, 2, 3], [1, 2])
    with pytest.raises(InputError):
        srcc([1], [1])
    with pytest.raises(InputError):
        srcc([2, 2, 2], [1, 2, 3])
    with pytest.raises(InputError):
        plcc([1, 2, 3], [4, 4, 4])


def test_plcc_examples():
    x = np.array([0.3, 1.2, 2.0, 5.5])
    assert plcc(x, 2 * x + 3) == pytest.approx(1.0)
    assert plcc(x, -x) == pytest.approx(-1.0)
    assert plcc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


vectors = st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=3, max_size=30)


@given(vectors, st.data())
def test_srcc_invariant_under_increasing_transform(x, data):
    y = data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(x), max_size=len(x)))
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    # strictly increasing; skip draws where rounding merges distinct inputs
    tx = [np.arctan(v) * 3 + v ** 3 for v in x]
    if len(set(tx)) != len(set(x)):
        return
    assert srcc(tx, y) == pytest.approx(srcc(x, y), abs=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=30),
       st.floats(0.1, 10), st.floats(-10, 10))
def test_plcc_affine_invariance(x, a, b):
    y = [v * v for v in x]
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    r = plcc(x, y)
    assert plcc(np.array(x) * a + b, y) == pytest.approx(r, abs=1e-9)
    assert plcc(-np.array(x), y) == pytest.approx(-r, abs=1e-9)


def test_accuracy_examples():
    assert accuracy([0.2, 0.9], [0.2, 0.9]) == 1.0
    assert accuracy([0, 0, 0], [1, 1, 1]) == 0.0
    assert accuracy([0.6, 0.4, 0.5], [1, 0, 0], 0.5) == pytest.approx(2 / 3)
    with pytest.raises(InputError):
        accuracy([], [])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 1))
def test_accuracy_identity_any_threshold(p, t):
    assert accuracy(p, p, t) == 1.0


def test_per_image_accuracy_differs_from_instance_level():
    preds = [[1.0], [0.0, 0.0, 0.0]]
    labels = [[1.0], [1.0, 1.0, 1.0]]
    assert per_image_accuracy(preds, labels) == pytest.approx(0.5)
    assert accuracy([1, 0, 0, 0], [1, 1, 1, 1]) == pytest.approx(0.25)


def test_composite_table_rows():
    assert composite(0.8002, 0.8321, 0.8691) == pytest.approx(0.8426, abs=5e-5)
    assert composite(0.7839, 0.8125, 0.8509) == pytest.approx(0.8245, abs=5e-5)
    assert composite(1, 1, 1) == 1.0


@given(st.floats(-1, 1))
def test_composite_constant_inputs(c):
    assert composite(c, c, c) == pytest.approx(c, abs=1e-15)


def test_metric_report_consistency_and_json():
    rep = MetricReport.from_parts(0.8002, 0.8321, 0.8691)
    assert rep.is_consistent()
    text = rep.to_json()
    assert text == '{"srcc": 0.800200, "plcc": 0.832100, "acc": 0.869100, "overall": 0.842625}'
    back = MetricReport.from_json(text)
    assert back.overall == pytest.approx(rep.overall, abs=1e-6)


def test_brute_oracles_sanity():
    assert brute_ranks([10, 20, 20, 5]) == [2, 3.5, 3.5, 1]
    assert brute_pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
