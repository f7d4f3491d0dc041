import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from fairembed.errors import InsufficientDataError, NumericError
from fairembed.scenarios import null_ks_distance
from fairembed.stats import (alexander_govern_test, betainc_regularized, chi_square_cdf, chi_square_sf,
                             gammainc_lower_regularized, normal_cdf, student_t_cdf, welch_t_test,
                             write_tests_csv)
from fairembed.csvio import read_csv

samples = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=30)


def test_welch_hand_example():
    r = welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert r.statistic == pytest.approx(-1.0, abs=1e-12)
    assert r.dof == pytest.approx(8.0, abs=1e-12)
    # high-precision t tail as the oracle
    p = float(2 * mpmath.quad(lambda t: mpmath.gamma(4.5) / (mpmath.sqrt(8 * mpmath.pi) * mpmath.gamma(4))
                              * (1 + t * t / 8) ** -4.5, [1, mpmath.inf]))
    assert r.p_value == pytest.approx(p, abs=1e-12)
    assert abs(r.p_value - 0.3466) < 1e-3
    assert not r.significant


def test_welch_identical_samples():
    r = welch_t_test([1, 2, 3], [1, 2, 3])
    assert r.statistic == 0 and r.p_value == 1


def test_welch_degenerate():
    with pytest.raises(NumericError):
        welch_t_test([2, 2, 2], [2, 2])
    with pytest.raises(InsufficientDataError):
        welch_t_test([1], [1, 2])


@pytest.mark.filterwarnings("ignore:Precision loss")
@given(samples, samples)
def test_welch_matches_scipy(x, y):
    if np.var(x) + np.var(y) == 0:
        return
    r = welch_t_test(x, y)
    ref = sps.ttest_ind(x, y, equal_var=False)
    assert r.statistic == pytest.approx(ref.statistic, rel=1e-9, abs=1e-9)
    assert r.p_value == pytest.approx(ref.pvalue, abs=1e-10)


@given(samples, samples, st.floats(1e-3, 1e3))
def test_welch_scale_invariant(x, y, c):
    if np.var(x) * np.var(y) == 0 or np.ptp(x + y) < 1e-6:
        return
    r1, r2 = welch_t_test(x, y), welch_t_test(np.multiply(x, c), np.multiply(y, c))
    assert r2.statistic == pytest.approx(r1.statistic, rel=1e-9, abs=1e-9)
    assert r2.dof == pytest.approx(r1.dof, rel=1e-9)
    assert r2.p_value == pytest.approx(r1.p_value, abs=1e-12)


@pytest.mark.parametrize("alt", ["greater", "less"])
def test_welch_one_sided(alt):
    rng = np.random.default_rng(3)
    x, y = rng.normal(0.3, 1, 15), rng.normal(0, 2, 22)
    r = welch_t_test(x, y, alt)
    ref = sps.ttest_ind(x, y, equal_var=False, alternative=alt)
    assert r.p_value == pytest.approx(ref.pvalue, abs=1e-12)
    assert r.test_name == f"welch_{alt}"


def test_welch_null_uniformity():
    rng = np.random.default_rng(0)
    p = [welch_t_test(*rng.normal(size=(2, 12))).p_value for _ in range(4000)]
    assert null_ks_distance(p) < 0.03


def test_alexander_govern_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        k = rng.integers(2, 5)
        groups = [rng.normal(rng.normal(), rng.uniform(0.5, 3), rng.integers(4, 30)) for _ in range(k)]
        r = alexander_govern_test(groups)
        ref = sps.alexandergovern(*groups)
        assert r.statistic == pytest.approx(ref.statistic, rel=1e-9)
        assert r.p_value == pytest.approx(ref.pvalue, abs=1e-9)
        assert r.dof == k - 1


def _ag_reference(groups):
    """Independent evaluation of the standard procedure in mpmath."""
    with mpmath.workdps(40):
        return _ag_reference_body(groups)


def _ag_reference_body(groups):
    stats = []
    for g in groups:
        g = [mpmath.mpf(v) for v in g]
        n = len(g)
        m = sum(g) / n
        s2 = sum((v - m) ** 2 for v in g) / (n - 1)
        stats.append((n, m, mpmath.sqrt(s2 / n)))
    w = [1 / s ** 2 for _, _, s in stats]
    grand = sum(wi * m for wi, (_, m, _) in zip(w, stats)) / sum(w)
    total = 0
    for n, m, s in stats:
        t = (m - grand) / s
        nu = n - 1
        a = nu - mpmath.mpf(1) / 2
        b = 48 * a ** 2
        c = mpmath.sqrt(a * mpmath.log(1 + t ** 2 / nu))
        z = c + (c ** 3 + 3 * c) / b - (4 * c ** 7 + 33 * c ** 5 + 240 * c ** 3 + 855 * c) / (
            10 * b ** 2 + 8 * b * c ** 4 + 1000 * b)
        total += z ** 2
    p = mpmath.gammainc(mpmath.mpf(len(groups) - 1) / 2, total / 2, mpmath.inf, regularized=True)
    return float(total), float(p)


def test_alexander_govern_independent_reference():
    x, y = [3.1, 2.4, 5.6, 4.4, 3.9, 4.0], [6.2, 5.1, 7.7, 6.9, 5.0, 8.1, 6.6]
    stat, p = _ag_reference([x, y])
    r = alexander_govern_test([x, y])
    assert r.statistic == pytest.approx(stat, rel=1e-10)
    assert r.p_value == pytest.approx(p, abs=1e-6)


def test_alexander_govern_identical_groups():
    g = [1.0, 2.5, 3.0, 4.5]
    r = alexander_govern_test([g, g, g])
    assert r.statistic == pytest.approx(0, abs=1e-12)
    assert r.p_value == pytest.approx(1, abs=1e-6)


def test_alexander_govern_permutation_invariant():
    rng = np.random.default_rng(5)
    groups = [rng.normal(i, 1 + i, 10 + i) for i in range(4)]
    r1 = alexander_govern_test(groups)
    r2 = alexander_govern_test(groups[::-1])
    assert r2.statistic == pytest.approx(r1.statistic, rel=1e-12)
    assert r2.p_value == pytest.approx(r1.p_value, abs=1e-12)


def test_alexander_govern_degenerate():
    with pytest.raises(NumericError):
        alexander_govern_test([[1, 1, 1], [1, 2, 3]])
    with pytest.raises(InsufficientDataError):
        alexander_govern_test([[1, 2, 3]])


def test_cdf_fixtures():
    assert student_t_cdf(0, 3.7) == 0.5
    assert normal_cdf(0) == 0.5
    assert abs(chi_square_cdf(2, 2) - (1 - math.exp(-1))) < 1e-10


@given(st.floats(-50, 50), st.floats(0.1, 1e4))
def test_t_cdf_symmetry_and_scipy(t, dof):
    assert student_t_cdf(t, dof) + student_t_cdf(-t, dof) == pytest.approx(1, abs=1e-12)
    assert student_t_cdf(t, dof) == pytest.approx(sps.t.cdf(t, dof), abs=1e-12)


def test_t_cdf_approaches_normal():
    grid = np.linspace(-5, 5, 201)
    assert max(abs(student_t_cdf(t, 1e6) - normal_cdf(t)) for t in grid) < 1e-4


@given(st.floats(0, 200), st.floats(0.1, 100))
def test_chi2_against_scipy(x, dof):
    assert chi_square_cdf(x, dof) == pytest.approx(sps.chi2.cdf(x, dof), abs=1e-12)
    assert chi_square_sf(x, dof) == pytest.approx(1 - sps.chi2.cdf(x, dof), abs=1e-12)


@given(st.floats(0.05, 200), st.floats(0.05, 200), st.floats(0, 1))
def test_betainc_against_mpmath(a, b, x):
    ref = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert betainc_regularized(a, b, x) == pytest.approx(ref, abs=1e-12)


@given(st.floats(0.05, 300), st.floats(0, 500))
def test_gammainc_against_mpmath(s, x):
    ref = float(mpmath.gammainc(s, 0, x, regularized=True))
    assert gammainc_lower_regularized(s, x) == pytest.approx(ref, abs=1e-12)


def test_invalid_dof():
    with pytest.raises(ValueError):
        student_t_cdf(1, 0)
    with pytest.raises(ValueError):
        chi_square_cdf(1, -1)


def test_tests_csv(tmp_path):
    r = welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    path = write_tests_csv(tmp_path / "t.csv", [r])
    header, rows = read_csv(path)
    assert header == ["test_name", "statistic", "dof", "p_value", "significant", "n_groups", "n_per_group"]
    assert rows[0][0] == "welch" and rows[0][4] == "false" and rows[0][6] == "5;5"
    assert path.read_bytes().count(b"\r") == 0
