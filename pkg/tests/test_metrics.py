import itertools
import math

import numpy as np
import pytest
from hypothesis import example, given, strategies as st

from mbrobust.metrics import (
    DegenerateVarianceError,
    PredictionRecords,
    RankTable,
    accuracy,
    ece,
    mean_std,
    mrr,
    welch_ttest,
)

from oracles import ece_oracle, random_records, records, welch_oracle


def test_accuracy_basic():
    assert accuracy(records([1, 1], [0, 1], [0, 1])) == 1.0
    assert accuracy(records([1, 1], [0, 0], [0, 1])) == 0.5
    with pytest.raises(ValueError):
        accuracy(records([], [], []))


def test_accuracy_counting_oracle():
    rng = np.random.default_rng(0)
    rec = random_records(rng, 1000)
    assert accuracy(rec) == sum(int(p == l) for p, l in zip(rec.predicted, rec.label)) / 1000


def test_ece_trivial_cases():
    assert ece(records([1.0] * 4, [1, 2, 3, 4], [1, 2, 3, 4])) == 0.0
    assert ece(records([0.8], [3], [3])) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(ValueError):
        ece(records([], [], []))
    with pytest.raises(ValueError):
        ece(records([0.5], [0], [0]), n_bins=0)


def test_ece_matches_oracle_on_random_cases():
    rng = np.random.default_rng(1)
    for _ in range(200):
        rec = random_records(rng, 100)
        n_bins = int(rng.integers(1, 30))
        assert abs(ece(rec, n_bins) - ece_oracle(rec, n_bins)) <= 1e-12


def test_ece_remainder_goes_to_leading_bins():
    # 5 records in 2 bins: sizes 3 and 2, lowest confidences in the first bin
    rec = records([0.1, 0.2, 0.3, 0.9, 1.0], [0, 0, 0, 0, 0], [1, 1, 1, 0, 0])
    expected = 3 / 5 * abs(0 - 0.2) + 2 / 5 * abs(1 - 0.95)
    assert ece(rec, 2) == pytest.approx(expected, abs=1e-15)


def test_ece_equal_width_option():
    rec = records([0.1, 0.15, 0.95], [0, 1, 0], [0, 0, 0])
    # bins of width 0.5: {0.1, 0.15} and {0.95}
    expected = 2 / 3 * abs(0.5 - 0.125) + 1 / 3 * abs(1 - 0.95)
    assert ece(rec, 2, "equal_width") == pytest.approx(expected)
    with pytest.raises(ValueError):
        ece(rec, 2, "quantile")


@given(st.integers(0, 2 ** 31), st.integers(1, 20))
def test_ece_permutation_invariant(seed, n_bins):
    rng = np.random.default_rng(seed)
    rec = random_records(rng, 60)
    perm = rng.permutation(60)
    shuffled = records(rec.confidence[perm], rec.predicted[perm], rec.label[perm])
    assert ece(rec, n_bins) == ece(shuffled, n_bins)


@given(st.integers(0, 2 ** 31))
def test_ece_single_bin_identity(seed):
    rec = random_records(np.random.default_rng(seed), 37)
    assert ece(rec, 1) == pytest.approx(abs(accuracy(rec) - rec.confidence.mean()), abs=1e-15)


def test_welch_identical_samples():
    r = welch_ttest([1, 2, 3], [1, 2, 3])
    assert r.t_statistic == 0 and r.p_value == 1.0
    assert r.ci_low < 0 < r.ci_high


def test_welch_textbook_example():
    r = welch_ttest([1, 2, 3], [2, 3, 4])
    t, df, p, lo, hi = welch_oracle([1, 2, 3], [2, 3, 4])
    for got, ref in ((r.t_statistic, t), (r.dof, df), (r.p_value, p), (r.ci_low, lo), (r.ci_high, hi)):
        assert abs(got - ref) <= 1e-9
    assert r.dof == pytest.approx(4.0)
    assert r.t_statistic == pytest.approx(-math.sqrt(1.5))


def test_welch_random_against_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.normal(0, rng.uniform(0.1, 3), int(rng.integers(2, 8))).tolist()
        b = rng.normal(0.5, rng.uniform(0.1, 3), int(rng.integers(2, 8))).tolist()
        r = welch_ttest(a, b)
        t, df, p, lo, hi = welch_oracle(a, b)
        assert abs(r.t_statistic - t) <= 1e-9 * max(1, abs(t))
        assert abs(r.p_value - p) <= 1e-9
        assert abs(r.ci_low - lo) <= 1e-9 and abs(r.ci_high - hi) <= 1e-9


def test_welch_rejections():
    with pytest.raises(DegenerateVarianceError):
        welch_ttest([1, 1, 1], [2, 2, 2])
    with pytest.raises(DegenerateVarianceError):
        welch_ttest([1, 1], [1, 1])
    with pytest.raises(ValueError):
        welch_ttest([1], [1, 2])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=8),
       st.lists(st.floats(-100, 100), min_size=2, max_size=8))
@example(a=[0.0, 0.0], b=[0.0, 9.433400960695761e-139])
def test_welch_properties(a, b):
    if np.var(a) == 0 and np.var(b) == 0:
        return
    r, s = welch_ttest(a, b), welch_ttest(b, a)
    assert 0 <= r.p_value <= 1
    assert r.ci_low <= r.ci_high
    assert np.sign(r.t_statistic) == np.sign(r.mean_1 - r.mean_2) or r.t_statistic == 0
    assert s.t_statistic == pytest.approx(-r.t_statistic)
    assert s.p_value == pytest.approx(r.p_value)
    assert (s.ci_low, s.ci_high) == pytest.approx((-r.ci_high, -r.ci_low))


def test_mrr_hand_tables():
    t = RankTable({("snow", 1, "accuracy"): {"A": 0.9, "B": 0.8},
                   ("snow", 2, "accuracy"): {"A": 0.7, "B": 0.75}})
    assert mrr(t, "A") == 0.75 and mrr(t, "B") == 0.75
    t2 = RankTable({("snow", 1, "ece"): {"A": 0.1, "B": 0.2, "C": 0.3},
                    ("rain", 0, "accuracy"): {"A": 0.9, "B": 0.9, "C": 0.1}})
    # ece lower is better; a two-way tie for first shares rank 1.5
    assert mrr(t2, "A") == pytest.approx((1 + 1 / 1.5) / 2)
    assert mrr(t2, "B") == pytest.approx((1 / 2 + 1 / 1.5) / 2)
    assert mrr(t2, "C") == pytest.approx((1 / 3 + 1 / 3) / 2)


def test_mrr_best_everywhere_is_one():
    t = RankTable({(c, s, m): {"best": 1.0 if m == "accuracy" else 0.0, "other": 0.5}
                   for c, s, m in itertools.product(("snow", "rain"), range(6), ("accuracy", "ece"))})
    assert mrr(t, "best") == 1.0


def test_mrr_missing_cell_named():
    t = RankTable({("snow", 1, "accuracy"): {"A": 1.0}, ("snow", 2, "accuracy"): {"B": 1.0}})
    with pytest.raises(KeyError, match="snow"):
        mrr(t, "A")


@given(st.integers(0, 2 ** 31), st.floats(0, 0.5))
def test_mrr_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    cells = {("snow", s, "accuracy"): {m: float(rng.uniform()) for m in "ABCD"} for s in range(4)}
    before = mrr(RankTable(cells), "A")
    cells[("snow", 2, "accuracy")]["A"] += bump
    assert mrr(RankTable(cells), "A") >= before


def test_mean_std():
    assert mean_std([3, 3, 3]) == (3, 0)
    m, s = mean_std([1, 2, 3, 4, 5])
    assert m == 3 and s == pytest.approx(math.sqrt(2.5))
    assert round(s, 4) == 1.5811
    assert mean_std([7.0]) == (7.0, 0.0)
    with pytest.raises(ValueError):
        mean_std([])
