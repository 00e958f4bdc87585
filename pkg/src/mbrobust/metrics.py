"""Accuracy, calibration error and cross-method statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.stats import rankdata


@dataclass(frozen=True)
class PredictionRecords:
    """Column view of per-example predictions: max-softmax confidence, prediction, truth."""

    confidence: np.ndarray
    predicted: np.ndarray
    label: np.ndarray

    @classmethod
    def from_probs(cls, probs: np.ndarray, labels) -> "PredictionRecords":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs.max(axis=1), probs.argmax(axis=1), np.asarray(labels))

    def __len__(self) -> int:
        return len(self.label)

    @property
    def correct(self) -> np.ndarray:
        return np.asarray(self.predicted) == np.asarray(self.label)


def _nonempty(records: PredictionRecords) -> None:
    if len(records) == 0:
        raise ValueError("metrics need at least one prediction record")


def accuracy(records: PredictionRecords) -> float:
    _nonempty(records)
    return float(records.correct.sum()) / len(records)


def equal_mass_bins(n: int, n_bins: int) -> np.ndarray:
    """Bin sizes for n sorted records; the first ``n % n_bins`` bins take one extra."""
    base, extra = divmod(n, n_bins)
    return np.array([base + 1] * extra + [base] * (n_bins - extra), dtype=np.int64)


def ece(records: PredictionRecords, n_bins: int = 15, binning: str = "equal_mass") -> float:
    """Expected calibration error, sum over bins of |bin|/N * |acc(bin) - conf(bin)|.

    ``equal_mass`` sorts by confidence and splits into bins of equal count;
    ``equal_width`` uses uniform confidence intervals on [0, 1].
    """
    _nonempty(records)
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    conf = np.asarray(records.confidence, dtype=np.float64)
    correct = records.correct.astype(np.float64)
    n = len(conf)
    if binning == "equal_mass":
        # ties in confidence are ordered by correctness so input order never matters
        order = np.lexsort((correct, conf))
        conf, correct = conf[order], correct[order]
        edges = np.concatenate([[0], np.cumsum(equal_mass_bins(n, n_bins))])
        total = 0.0
        for lo, hi in zip(edges[:-1], edges[1:]):
            if hi > lo:
                total += (hi - lo) / n * abs(correct[lo:hi].mean() - conf[lo:hi].mean())
        return float(total)
    if binning == "equal_width":
        idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
        total = 0.0
        for b in range(n_bins):
            m = idx == b
            if m.any():
                total += m.sum() / n * abs(correct[m].mean() - conf[m].mean())
        return float(total)
    raise ValueError(f"binning must be equal_mass or equal_width, got {binning!r}")


class DegenerateVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class WelchResult:
    mean_1: float
    mean_2: float
    t_statistic: float
    dof: float
    p_value: float
    ci_low: float
    ci_high: float
    alpha: float = 0.05

    @property
    def ci95(self) -> tuple[float, float]:
        return self.ci_low, self.ci_high

    @property
    def significant(self) -> bool:
        return self.p_value < self.alpha


def welch_ttest(sample_a, sample_b, alpha: float = 0.05) -> WelchResult:
    """Two-sided unequal-variance t-test with a (1 - alpha) interval on mean_a - mean_b."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"each sample needs at least 2 values, got {len(a)} and {len(b)}")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    diff = ma - mb
    if se2 == 0:
        raise DegenerateVarianceError("standard error is zero (or underflows); the t statistic is undefined")
    se = math.sqrt(se2)
    t = diff / se
    # scale-free form; squaring tiny variances would underflow
    wa, wb = va / se2, vb / se2
    dof = 1.0 / (wa ** 2 / (len(a) - 1) + wb ** 2 / (len(b) - 1))
    p = float(min(1.0, 2.0 * special.stdtr(dof, -abs(t))))
    crit = float(special.stdtrit(dof, 1.0 - alpha / 2.0))
    return WelchResult(float(ma), float(mb), float(t), float(dof), p, float(diff - crit * se),
                       float(diff + crit * se), alpha)


# ranking

HIGHER_IS_BETTER = {"accuracy": True, "ece": False}


@dataclass
class RankTable:
    """Metric values per cell ``(corruption, severity, metric)`` and method."""

    values: dict[tuple, dict[str, float]]

    @property
    def methods(self) -> list[str]:
        return sorted({m for row in self.values.values() for m in row})

    @property
    def cells(self) -> list[tuple]:
        return sorted(self.values, key=lambda c: tuple(str(x) for x in c))

    def ranks(self, cell) -> dict[str, float]:
        """Average ranks (1 = best) within one cell."""
        row = self.values[cell]
        metric = cell[-1]
        names = sorted(row)
        vals = np.array([row[m] for m in names], dtype=np.float64)
        key = -vals if HIGHER_IS_BETTER.get(metric, True) else vals
        return dict(zip(names, rankdata(key, method="average").tolist()))


def mrr(table: RankTable, method: str) -> float:
    """Mean over cells of 1 / rank of ``method``."""
    if not table.values:
        raise ValueError("empty rank table")
    total = 0.0
    for cell in table.cells:
        if method not in table.values[cell]:
            raise KeyError(f"method {method!r} has no value in cell {cell}")
        total += 1.0 / table.ranks(cell)[method]
    return total / len(table.values)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("mean_std needs at least one value")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
