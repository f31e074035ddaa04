"""Significance testing of repeated-run accuracies."""

from typing import Sequence

import numpy as np
from scipy import stats

from .errors import DegenerateTestError


def t_test(samples: Sequence[float], mu0: float) -> float:
    """Two-sided one-sample Student's t-test p-value of ``samples`` against ``mu0``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise DegenerateTestError(f"a one-sample t-test needs at least 2 samples, got {x.size}")
    if np.ptp(x) == 0:
        raise DegenerateTestError("samples have zero variance")
    return float(stats.ttest_1samp(x, mu0).pvalue)


def t_statistic(samples: Sequence[float], mu0: float) -> float:
    x = np.asarray(samples, dtype=np.float64)
    return float((x.mean() - mu0) / (x.std(ddof=1) / np.sqrt(x.size)))
