"""Welch's t-test, the Alexander-Govern test and the distribution functions
behind them.

Special functions are evaluated with the usual series / Lentz continued
fraction pair, switching representation where each converges fastest.
Tolerance is 1e-12 absolute (relative inside the expansions) with a cap of
500 terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .csvio import write_csv
from .errors import ConvergenceError, InsufficientDataError, NumericError

EPS = 1e-15
TOL = 1e-12
MAX_ITER = 500
FPMIN = 1e-300
ALPHA = 0.05


@dataclass(frozen=True)
class TestResult:
    test_name: str
    statistic: float
    dof: float
    p_value: float
    n_per_group: tuple[int, ...]
    null_hypothesis: str = "equal means"

    __test__ = False  # not a pytest class

    @property
    def significant(self) -> bool:
        return self.p_value < ALPHA

    @property
    def n_groups(self) -> int:
        return len(self.n_per_group)

    def row(self) -> list:
        return [self.test_name, self.statistic, self.dof, self.p_value, self.significant, self.n_groups,
                ";".join(str(n) for n in self.n_per_group)]


TEST_HEADER = ["test_name", "statistic", "dof", "p_value", "significant", "n_groups", "n_per_group"]


def write_tests_csv(path: str | Path, results: Sequence[TestResult], extra_header=(), extra_rows=None) -> Path:
    extra_rows = extra_rows or [[] for _ in results]
    return write_csv(path, list(extra_header) + TEST_HEADER,
                     (list(e) + r.row() for e, r in zip(extra_rows, results)))


# --- special functions -------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > FPMIN else FPMIN)
    h = d
    for m in range(1, MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > FPMIN else FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > FPMIN else FPMIN
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > FPMIN else FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > FPMIN else FPMIN
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            return h
    raise ConvergenceError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


_STIRLING = (1.0 / 12, -1.0 / 360, 1.0 / 1260, -1.0 / 1680, 1.0 / 1188)
_LARGE = 10.0


def _stirling_corr(x: float) -> float:
    """``lgamma(x) - [(x - 1/2) ln x - x + ln(2 pi)/2]`` for x >= 10."""
    inv, inv2 = 1.0 / x, 1.0 / (x * x)
    total, p = 0.0, inv
    for c in _STIRLING:
        total += c * p
        p *= inv2
    return total


def _log_beta(a: float, b: float) -> float:
    """``ln B(a, b)`` without the cancellation of three large lgamma values."""
    small, big = min(a, b), max(a, b)
    if big < _LARGE:
        return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    if small < _LARGE:
        # lgamma(big + small) - lgamma(big), expanded around big
        diff = (small * math.log(big) + (big + small - 0.5) * math.log1p(small / big) - small
                + _stirling_corr(big + small) - _stirling_corr(big))
        return math.lgamma(small) - diff
    return (0.5 * math.log(2 * math.pi) - 0.5 * math.log(a + b) - (a - 0.5) * math.log1p(b / a)
            - (b - 0.5) * math.log1p(a / b) + _stirling_corr(a) + _stirling_corr(b) - _stirling_corr(a + b))


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    return _betainc(a, b, x, 1.0 - x)


def _betainc(a: float, b: float, x: float, y: float) -> float:
    """``I_x(a, b)`` with ``y = 1 - x`` supplied separately so neither loses digits."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log(y) - _log_beta(a, b)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def gammainc_lower_regularized(s: float, x: float) -> float:
    """Regularized lower incomplete gamma ``P(s, x)``."""
    if s <= 0:
        raise ValueError("gammainc needs s > 0")
    if x <= 0:
        return 0.0
    log_front = -x + s * math.log(x) - math.lgamma(s)
    if x < s + 1.0:
        term = 1.0 / s
        total = term
        ap = s
        for _ in range(MAX_ITER):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * EPS:
                return total * math.exp(log_front)
        raise ConvergenceError(f"incomplete gamma series did not converge (s={s}, x={x})")
    # continued fraction for Q(s, x)
    b = x + 1.0 - s
    c = 1.0 / FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, MAX_ITER + 1):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        d = 1.0 / (d if abs(d) > FPMIN else FPMIN)
        c = b + an / c
        c = c if abs(c) > FPMIN else FPMIN
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            return 1.0 - math.exp(log_front) * h
    raise ConvergenceError(f"incomplete gamma continued fraction did not converge (s={s}, x={x})")


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def student_t_cdf(t: float, dof: float) -> float:
    if dof <= 0:
        raise ValueError("dof must be positive")
    if t == 0:
        return 0.5
    tail = 0.5 * _t_tail(t, dof)
    return 1.0 - tail if t > 0 else tail


def student_t_sf_two_sided(t: float, dof: float) -> float:
    """``P(|T| >= |t|)`` computed directly (no cancellation for large |t|)."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if t == 0:
        return 1.0
    return _t_tail(t, dof)


def _t_tail(t: float, dof: float) -> float:
    """``P(|T| >= |t|) = I_x(dof/2, 1/2)`` with ``x = dof / (dof + t^2)``."""
    t2 = t * t
    if math.isinf(t2):
        return 0.0
    return _betainc(0.5 * dof, 0.5, dof / (dof + t2), t2 / (dof + t2))


def chi_square_cdf(x: float, dof: float) -> float:
    if dof <= 0:
        raise ValueError("dof must be positive")
    return gammainc_lower_regularized(0.5 * dof, 0.5 * x) if x > 0 else 0.0


def chi_square_sf(x: float, dof: float) -> float:
    return 1.0 - chi_square_cdf(x, dof)


# --- tests -------------------------------------------------------------------

def _moments(sample) -> tuple[int, float, float]:
    x = np.asarray(sample, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InsufficientDataError("each sample needs at least 2 observations")
    if not np.all(np.isfinite(x)):
        raise NumericError("samples must be finite")
    return x.size, float(x.mean()), float(x.var(ddof=1))


def welch_t_test(sample1, sample2, alternative: str = "two-sided") -> TestResult:
    """Two-sample t-test without the equal-variance assumption.

    ``alternative`` is ``two-sided`` (default), ``greater`` (mean1 > mean2) or ``less``.
    """
    n1, m1, v1 = _moments(sample1)
    n2, m2, v2 = _moments(sample2)
    se1, se2 = v1 / n1, v2 / n2
    se = se1 + se2
    if se == 0:
        raise NumericError("both samples have zero variance")
    t = (m1 - m2) / math.sqrt(se)
    # Welch-Satterthwaite on standard errors scaled to max 1 (avoids underflow)
    scale = max(se1, se2)
    r1, r2 = se1 / scale, se2 / scale
    dof = (r1 + r2) ** 2 / (r1 * r1 / (n1 - 1) + r2 * r2 / (n2 - 1))
    if alternative == "two-sided":
        p = student_t_sf_two_sided(t, dof)
    elif alternative == "greater":
        p = 1.0 - student_t_cdf(t, dof) if t <= 0 else 0.5 * student_t_sf_two_sided(t, dof)
    elif alternative == "less":
        p = student_t_cdf(t, dof) if t <= 0 else 1.0 - 0.5 * student_t_sf_two_sided(t, dof)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    name = "welch" if alternative == "two-sided" else f"welch_{alternative}"
    return TestResult(name, t, dof, min(1.0, max(0.0, p)), (n1, n2))


def _hill_normalize(t: float, nu: float) -> float:
    """Hill's (1970) normalizing transformation of a t statistic with nu dof."""
    a = nu - 0.5
    b = 48.0 * a * a
    c = math.sqrt(a * math.log1p(t * t / nu))
    z = (c + (c ** 3 + 3.0 * c) / b
         - (4.0 * c ** 7 + 33.0 * c ** 5 + 240.0 * c ** 3 + 855.0 * c) / (10.0 * b * b + 8.0 * b * c ** 4 + 1000.0 * b))
    return z


def alexander_govern_test(samples: Sequence) -> TestResult:
    """Alexander & Govern (1994) test of equal means under heteroscedasticity.

    Each group's mean is compared with the precision-weighted grand mean,
    the resulting t statistics are normalized with Hill's approximation, and
    their squares are summed against a chi-square with K - 1 dof.
    """
    if len(samples) < 2:
        raise InsufficientDataError("Alexander-Govern needs at least 2 samples")
    stats = [_moments(s) for s in samples]
    if any(v <= 0 for _, _, v in stats):
        raise NumericError("every Alexander-Govern group needs positive variance")
    se = np.array([math.sqrt(v / n) for n, _, v in stats])
    means = np.array([m for _, m, _ in stats])
    w = (1.0 / se ** 2) / np.sum(1.0 / se ** 2)
    grand = float(np.sum(w * means))
    z = [_hill_normalize((m - grand) / s, n - 1.0) for (n, _, _), m, s in zip(stats, means, se)]
    a_stat = float(sum(zi * zi for zi in z))
    k = len(samples)
    p = chi_square_sf(a_stat, k - 1)
    return TestResult("alexander_govern", a_stat, float(k - 1), min(1.0, max(0.0, p)),
                      tuple(n for n, _, _ in stats))
