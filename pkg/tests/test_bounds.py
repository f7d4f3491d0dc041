import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairembed.bounds import (AuditReport, BoundForm, BoundInputs, audit_bound, audit_configurations,
                              audit_embedder, bound_inputs_from, epsilon_infeasibility_bound, eta_interval,
                              likelihood_ratio_oracle, log_ratio_bound, solve_inequality_roots)
from fairembed.errors import ConfigError, SingularConfigurationError
from fairembed.synthetic import Group, HierarchicalGaussianParams

finite = st.floats(-20, 20).filter(lambda v: abs(v) > 1e-3)
gammas = st.floats(0.05, 0.95)


def test_degenerate_interval_at_a_zero():
    for form in BoundForm:
        if form is BoundForm.DERIVED:
            continue
        iv = eta_interval(BoundInputs(0.0, 2.0, 0.5, 3.0), form)
        assert iv.lower == pytest.approx(-1.5) and iv.upper == pytest.approx(-1.5)
        assert not iv.empty and iv.contains(-1.5)


def test_invalid_inputs():
    with pytest.raises(SingularConfigurationError):
        BoundInputs(1.0, 1.0, 1.0, 1.0)
    with pytest.raises(SingularConfigurationError):
        BoundInputs(1.0, 0.0, 0.5, 1.0)


def test_printed_example():
    assert epsilon_infeasibility_bound(BoundInputs(0.0, 1.0, 0.5, -2.0), "printed") == pytest.approx(2.0)


def test_derived_roots_match_numeric_solution():
    inp = BoundInputs(1.0, 1.0, 0.25, 1.0)
    iv = eta_interval(inp, "derived")
    # (v + 1)^2 = 0.25 (v - 1)^2  ->  v = -1/3 or v = -3; eta = v - 1
    assert iv.lower == pytest.approx(-4.0, abs=1e-9) and iv.upper == pytest.approx(-4 / 3, abs=1e-9)
    lo, hi = solve_inequality_roots(inp)
    assert iv.lower == pytest.approx(lo, abs=1e-9) and iv.upper == pytest.approx(hi, abs=1e-9)


@given(finite, finite, gammas, finite)
def test_derived_roots_are_zeros_of_log_ratio(a, b, g, p):
    inp = BoundInputs(a, b, g, p)
    iv = eta_interval(inp, "derived")
    scale = max(1.0, (abs(a) + abs(p) + abs(b) * max(abs(iv.lower), abs(iv.upper))) ** 2)
    assert np.all(np.abs(log_ratio_bound(inp, [iv.lower, iv.upper])) <= 1e-9 * scale)
    # the inequality holds strictly between the roots and fails outside
    mid = 0.5 * (iv.lower + iv.upper)
    if iv.upper - iv.lower > 1e-6:
        assert log_ratio_bound(inp, mid) > 0
    num = solve_inequality_roots(inp)
    assert num is not None
    assert iv.lower == pytest.approx(num[0], rel=1e-7, abs=1e-7)
    assert iv.upper == pytest.approx(num[1], rel=1e-7, abs=1e-7)


@given(finite, finite, gammas, finite)
def test_printed_form_equals_roots_with_a_and_psi_mu_b_exchanged(a, b, g, p):
    printed = eta_interval(BoundInputs(a, b, g, p), "printed")
    swapped = eta_interval(BoundInputs(p, b, g, a), "derived")
    assert printed.lower == pytest.approx(swapped.lower, rel=1e-9, abs=1e-9)
    assert printed.upper == pytest.approx(swapped.upper, rel=1e-9, abs=1e-9)


@given(finite, finite, gammas, finite)
def test_negation_invariance(a, b, g, p):
    inp = BoundInputs(a, b, g, p)
    for form in BoundForm:
        i1, i2 = eta_interval(inp, form), eta_interval(inp.negated(), form)
        assert i1.lower == pytest.approx(i2.lower, rel=1e-12, abs=1e-12)
        assert i1.upper == pytest.approx(i2.upper, rel=1e-12, abs=1e-12)
        assert epsilon_infeasibility_bound(inp, form) == pytest.approx(
            epsilon_infeasibility_bound(inp.negated(), form), rel=1e-12, abs=1e-12)


@given(finite, finite, gammas, finite)
def test_bound_nonnegative(a, b, g, p):
    for form in BoundForm:
        assert epsilon_infeasibility_bound(BoundInputs(a, b, g, p), form) >= 0


def _sym_params(gamma=1.0):
    return HierarchicalGaussianParams(d=2, gamma=gamma, beta=1e-3, alpha=0.5, mu_a=[1.0, 0.0],
                                      sigma_b_diag=[1.0 / gamma, 0.1], n_identities_a=1, n_identities_b=1, m=1)


def test_oracle_symmetric_groups_cross_at_midpoint():
    p = _sym_params(1.0)
    emb = audit_embedder(p)
    res = 1e-3
    x = np.array([1.0, 0.3])
    u = (p.mean(Group.B) - x) / np.linalg.norm(p.mean(Group.B) - x)
    a, b = emb.embed(x)[0], emb.components[:, 0] @ u
    cross = likelihood_ratio_oracle(x, p, emb, max_eta=5.0, resolution=res)
    # equal variances: the comparison flips where the embedded point passes the origin
    assert cross is not None and abs(cross - (-a / b)) <= res + 1e-12
    assert likelihood_ratio_oracle(x, p, emb, max_eta=0.5, resolution=res) is None
    # from mu_a itself the crossing is half the distance between the group means
    cross = likelihood_ratio_oracle(p.mean(Group.A), p, emb, max_eta=5.0, resolution=res)
    half = np.linalg.norm(p.mean(Group.B) - p.mean(Group.A)) / 2
    assert cross is not None and abs(cross - half) <= res + 1e-12
    with pytest.raises(ConfigError):
        likelihood_ratio_oracle(x, p, emb, max_eta=5.0, resolution=0)


@pytest.mark.parametrize("gamma", [0.2, 0.4, 0.8])
def test_oracle_matches_exact_crossing_and_bound_is_sound(gamma):
    p = _sym_params(gamma)
    emb = audit_embedder(p)
    x = np.array([0.8, -0.2])
    inp = bound_inputs_from(x, p, emb)
    res = 1e-4
    cross = likelihood_ratio_oracle(x, p, emb, max_eta=10.0, resolution=res)
    # independent 1-D crossing: equal Gaussian log densities including the log-variance term
    ma, mb = emb.embed(p.mean(Group.A))[0], inp.psi_mu_b
    va, vb = 1.0, 1.0 / gamma
    # -(v-mb)^2/vb - log vb = -(v-ma)^2/va - log va, with v = a + eta b
    a, b = inp.a, inp.b
    quad = np.polysub(np.polymul([b, a - ma], [b, a - ma]) / va, np.polymul([b, a - mb], [b, a - mb]) / vb)
    quad = np.polyadd(quad, [math.log(va / vb)])
    roots = sorted(r.real for r in np.roots(quad) if abs(r.imag) < 1e-12 and r.real >= 0)
    assert cross is not None and abs(cross - roots[0]) <= res + 1e-9
    assert cross >= epsilon_infeasibility_bound(inp, "derived") - res


def test_bound_inputs_preconditions():
    p = _sym_params(0.5)
    emb = audit_embedder(p)
    with pytest.raises(SingularConfigurationError):
        bound_inputs_from(p.mean(Group.B), p, emb)


def test_derived_form_is_sound_on_random_configurations():
    cfgs = audit_configurations(25, seed=3)
    rep = audit_bound(cfgs, resolution=1e-3, max_eta=20.0, form="derived")
    assert rep.violations == 0
    assert rep.max_root_residual < 1e-9
    assert rep.slack_summary()["min"] >= -1e-3


def test_audit_configurations_deterministic():
    a, b = audit_configurations(5, seed=1), audit_configurations(5, seed=1)
    assert all(np.array_equal(x.x, y.x) and x.params == y.params for x, y in zip(a, b))
    assert all(0.1 <= c.params.gamma <= 0.9 and 2 <= c.params.d <= 6 for c in a)


def test_empty_sweep(tmp_path):
    rep = audit_bound([], form="printed")
    assert isinstance(rep, AuditReport) and rep.rows == [] and rep.violations == 0
    assert rep.slack_summary() == {} and rep.max_root_residual == 0.0
    assert rep.to_csv(tmp_path / "a.csv").read_text().count("\n") == 1
