"""
Student t tail probabilities and the pooled-variance two-sample t-test over PPVs.
"""

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DataError

_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 10000


@dataclass(frozen=True)
class TTestResult:
    mean_1: float
    mean_2: float
    std_1: float
    std_2: float
    n_1: int
    n_2: int
    t: float
    df: int
    p: float        # one-sided upper tail: small when sample 1 exceeds sample 2

    def to_dict(self) -> dict:
        return asdict(self)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    if t == 0:
        return 0.5
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return tail if t > 0 else 1.0 - tail


def ttest_from_summary(mean_1: float, std_1: float, n_1: int,
                       mean_2: float, std_2: float, n_2: int) -> TTestResult:
    """
    Pooled-variance t statistic from summary statistics (sample standard deviations).
    """
    if n_1 < 2 or n_2 < 2:
        raise DataError(f"t-test needs at least 2 observations per sample, got {n_1} and {n_2}")
    df = n_1 + n_2 - 2
    pooled = ((n_1 - 1) * std_1 ** 2 + (n_2 - 1) * std_2 ** 2) / df
    se = math.sqrt(pooled * (1.0 / n_1 + 1.0 / n_2))
    diff = mean_1 - mean_2
    if se == 0.0:
        if diff == 0.0:
            t = 0.0
        else:
            t = math.copysign(math.inf, diff)
    else:
        t = diff / se
    return TTestResult(mean_1, mean_2, std_1, std_2, n_1, n_2, t, df, student_t_sf(t, df))


def pooled_t_test(ppv_candidate: Sequence[float], ppv_baseline: Sequence[float]) -> TTestResult:
    """One-sided pooled t-test; positive t favours the candidate."""
    x1 = np.asarray(ppv_candidate, dtype=np.float64)
    x2 = np.asarray(ppv_baseline, dtype=np.float64)
    if x1.size < 2 or x2.size < 2:
        raise DataError(f"t-test needs at least 2 observations per sample, got {x1.size} and {x2.size}")
    return ttest_from_summary(float(x1.mean()), float(x1.std(ddof=1)), int(x1.size),
                              float(x2.mean()), float(x2.std(ddof=1)), int(x2.size))
