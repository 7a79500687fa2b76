"""Paired t-test over per-run metric differences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _scipy_stats

from ..errors import DegenerateStatisticsError, ShapeError


@dataclass
class TTestReport:
    differences: list[float]
    mean: float
    std: float        # sample std of the differences, ddof = 1
    t: float
    p: float          # two-sided
    dof: int


def paired_ttest(runs_a: list[float], runs_b: list[float]) -> TTestReport:
    """Classic paired t on d_i = a_i - b_i with k - 1 degrees of freedom.

    The statistic is computed here; only the t-distribution CDF evaluation
    is delegated. Zero variance in the differences leaves t undefined and
    raises rather than returning an infinity.
    """
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"paired runs must be equal-length vectors, got {a.shape} and {b.shape}")
    k = a.size
    if k < 2:
        raise DegenerateStatisticsError("need at least 2 paired runs")
    d = a - b
    mean = float(d.mean())
    std = float(d.std(ddof=1))
    if std == 0.0:
        raise DegenerateStatisticsError("zero variance in paired differences")
    t = mean / (std / math.sqrt(k))
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), k - 1))
    return TTestReport(differences=[float(x) for x in d], mean=mean, std=std,
                       t=t, p=p, dof=k - 1)
