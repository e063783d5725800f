import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lcmi.critical_values import SimDraws
from lcmi.inference import (
    EmptyConfidenceSet,
    TestSpec,
    canonical_method,
    invert_grid,
    linear_ci_bound,
    project_nonlinear_nuisance,
    run_test,
    run_tests,
)
from lcmi.moments import NormalModel, ObservationSet

from conftest import random_model, random_sigma

METHODS = ("lfp", "lf", "conditional", "hybrid")


def test_spec_defaults_and_validation():
    s = TestSpec()
    assert s.method == "hybrid" and s.kappa == pytest.approx(0.005) and s.floor_c == 100.0
    assert s.hybrid_level == pytest.approx((0.05 - 0.005) / 0.995)
    assert canonical_method("cond") == "conditional"
    with pytest.raises(ValueError):
        TestSpec(alpha=0.05, kappa=0.06)
    with pytest.raises(ValueError):
        TestSpec(method="bootstrap")
    with pytest.raises(ValueError):
        TestSpec(floor_c=0.0)


def test_scalar_case_all_reject():
    m = NormalModel([2.0], np.zeros((1, 0)), np.eye(1))
    draws = SimDraws.generate(1, 10_000, 0)
    for method in METHODS:
        d = run_test(m, TestSpec(method, sim_count=10_000), draws)
        assert d.reject, method
    d = run_test(m, TestSpec("conditional"))
    assert d.critical_value == pytest.approx(stats.norm.ppf(0.95), abs=1e-8)


def test_close_moments_hurt_conditional():
    m = NormalModel([2.0, 1.99], np.zeros((2, 0)), np.eye(2))
    draws = SimDraws.generate(2, 10_000, 0)
    cond = run_test(m, TestSpec("conditional"), draws)
    lf = run_test(m, TestSpec("lf", sim_count=10_000), draws)
    assert cond.critical_value >= 1.99
    assert not cond.reject and lf.reject
    want = stats.norm.ppf(0.95 + 0.05 * stats.norm.cdf(1.99))
    assert cond.critical_value == pytest.approx(want, abs=1e-6)


def test_trivial_null_never_rejects():
    m = NormalModel([50.0, 50.0], [[-1.0], [-2.0]], np.eye(2))
    for method in METHODS:
        d = run_test(m, TestSpec(method))
        assert not d.reject
        assert d.diagnostics["lp_status"] == "trivially_satisfied_null"


def test_floor_blocks_rejection():
    m = NormalModel([-150.0, -151.0], np.zeros((2, 0)), np.eye(2))
    d = run_test(m, TestSpec("conditional"))
    assert not d.reject and d.diagnostics["below_floor"]


def test_degenerate_variance_rule():
    m = NormalModel([0.0, 0.3], np.zeros((2, 0)), np.eye(2))
    assert "degenerate_variance" not in run_test(m, TestSpec("conditional")).diagnostics
    # perfectly negatively correlated moments put zero variance on the dual vertex
    m = NormalModel([0.2, -0.2], [[1.0], [-1.0]], np.array([[1.0, -1.0], [-1.0, 1.0]]))
    d = run_test(m, TestSpec("conditional"))
    assert d.diagnostics.get("degenerate_variance")
    assert d.reject == (d.statistic > 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2), st.integers(0, 100_000))
def test_nesting_and_decision_invariant(k, p, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, k, min(p, k - 1), mean=rng.uniform(-1, 3))
    draws = SimDraws.generate(k, 300, 1)
    specs = [TestSpec(method, sim_count=300) for method in METHODS]
    lfp, lf, cond, hyb = run_tests(m, specs, specs[0].cache(draws))
    if lfp.reject:
        assert lf.reject
    if hyb.diagnostics.get("stage") == 1:
        assert hyb.reject
    if "c_kappa" in hyb.diagnostics and hyb.statistic > hyb.diagnostics["c_kappa"]:
        assert hyb.reject
    for d in (cond, hyb):
        if math.isfinite(d.statistic):
            assert d.reject == (d.statistic > d.critical_value and d.statistic >= -100.0)


def test_shift_invariance(rng):
    draws = SimDraws.generate(5, 300, 2)
    for _ in range(10):
        m = random_model(rng, 5, 2, mean=1.0)
        shifted = m.with_y(m.y_n + m.x_n @ rng.normal(size=2))
        for method in METHODS:
            spec = TestSpec(method, sim_count=300)
            a, b = run_test(m, spec, draws), run_test(shifted, spec, draws)
            assert a.reject == b.reject
            assert a.statistic == pytest.approx(b.statistic, abs=1e-8)


def test_conditional_size_k6_p1():
    rng = np.random.default_rng(99)
    sigma = random_sigma(rng, 6)
    x = rng.normal(size=(6, 1))
    chol = np.linalg.cholesky(sigma)
    reps = 2000
    rej = sum(
        run_test(NormalModel(chol @ rng.normal(size=6), x, sigma), TestSpec("conditional")).reject
        for _ in range(reps)
    )
    assert 0.035 <= rej / reps <= 0.065


def test_decision_record_fields():
    d = run_test(NormalModel([2.0, 1.0], np.zeros((2, 0)), np.eye(2)), TestSpec("hybrid"))
    rec = d.record()
    assert set(rec) == {"method", "statistic", "critical_value", "reject", "vertex_ok", "v_lo", "v_up"}


# confidence sets


def _two_sided(b):
    return NormalModel([b - 1.0, -b - 1.0], [[0.0], [0.0]], np.eye(2))


def test_always_reject_gives_empty_set():
    cs = invert_grid(lambda b: NormalModel([100.0], np.zeros((1, 0)), np.eye(1)), [0.0, 1.0], TestSpec("lfp"))
    assert cs.is_empty and cs.hull is None and cs.length == 0.0


def test_grid_inversion_and_records(tmp_path):
    grid = np.linspace(-5, 5, 101)
    cs = invert_grid(_two_sided, grid, TestSpec("lfp", sim_count=5000))
    lo, hi = cs.hull
    assert -3.2 < lo < -2.5 and 2.5 < hi < 3.2
    assert not cs.touches_grid_edge
    path = tmp_path / "records.csv"
    cs.write_records(path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 101
    assert list(rows[0]) == ["beta", "method", "statistic", "critical_value", "reject", "vertex_ok", "v_lo", "v_up"]


def test_grid_edge_warning():
    with pytest.warns(UserWarning, match="edge of the grid"):
        cs = invert_grid(_two_sided, np.linspace(-1, 1, 11), TestSpec("lf"))
    assert cs.touches_grid_edge


def test_invert_grid_estimates_sigma_from_observations(rng):
    n = 400
    z = rng.normal(size=(n, 1))
    e = rng.normal(size=(n, 2))

    def problem_at(b):
        return ObservationSet(e + np.array([b, -b]) - 0.1, np.zeros((n, 2, 0)), z)

    cs = invert_grid(problem_at, [-1.0, 0.0, 1.0], TestSpec("lfp"))
    assert cs.accepted.tolist() == [False, True, False]


def test_linear_ci_bound_examples():
    m = NormalModel([0.0, 0.0], [[1.0], [-1.0]], np.eye(2))
    assert linear_ci_bound(m, np.array([1.0]), 1.645, "upper") == pytest.approx(1.645)
    assert linear_ci_bound(m, np.array([1.0]), 1.645, "lower") == pytest.approx(-1.645)
    assert linear_ci_bound(m, np.array([2.0]), 1.645, "upper") == pytest.approx(3.29)
    with pytest.raises(EmptyConfidenceSet):
        linear_ci_bound(m.with_y([3.0, 3.0]), np.array([1.0]), 1.0)
    with pytest.raises(ValueError):
        linear_ci_bound(m, np.array([1.0]), math.inf)


def test_lf_interval_nested_in_lfp(rng):
    draws = SimDraws.generate(4, 1000, 3)
    for _ in range(10):
        m = random_model(rng, 4, 2)
        spec = TestSpec("lf")
        cache = spec.cache(draws)
        c_lf, c_lfp = cache.lf(m, 0.05), cache.lfp(m.sigma, 0.05)
        if not math.isfinite(c_lf):
            continue
        l = np.array([1.0, 0.0])
        try:
            lf = (linear_ci_bound(m, l, c_lf, "lower"), linear_ci_bound(m, l, c_lf, "upper"))
        except EmptyConfidenceSet:
            continue
        lfp = (linear_ci_bound(m, l, c_lfp, "lower"), linear_ci_bound(m, l, c_lfp, "upper"))
        assert lfp[0] <= lf[0] + 1e-9 and lf[1] <= lfp[1] + 1e-9


def test_projection_singleton_and_monotone():
    def problem_at(b1, b2):
        return NormalModel([b1 - 1.0 + b2, -b1 - 1.0 + b2], np.zeros((2, 0)), np.eye(2))

    grid1 = np.linspace(-4, 4, 41)
    spec = TestSpec("lfp")
    single = project_nonlinear_nuisance(problem_at, grid1, [0.5], spec)
    direct = invert_grid(lambda b: problem_at(b, 0.5), grid1, spec)
    np.testing.assert_array_equal(single.accepted, direct.accepted)
    wider = project_nonlinear_nuisance(problem_at, grid1, [0.5, -1.0], spec)
    assert np.all(wider.accepted >= single.accepted)
    assert wider.accepted.sum() > single.accepted.sum()
