import numpy as np
import pytest

from padr import costs, diagnostics, rules, smm
from padr.core import Dataset, HypothesisConfig, RngHandle, Theta, random_init


def quantile_problem(seed=0, n=200):
    y = RngHandle(seed, "data").generator().normal(10.0, 2.0, size=(n, 1))
    data = Dataset(np.zeros((n, 0)), y)
    cfg = HypothesisConfig(1, 1, 0, 0, 50.0)
    return smm.Problem(data, cfg, costs.newsvendor(8.0, 2.0))


def intercept_theta(problem, value):
    return Theta(problem.cfg, np.array([[[value]]]))


def flat_minimizer(problem):
    # pinball loss at ratio 0.8 is flat between the 160th and 161st order
    # statistics; the midpoint is an interior empirical risk minimizer
    y = np.sort(problem.data.outcomes[:, 0])
    lo, hi = y[159], y[160]
    assert lo < hi
    return 0.5 * (lo + hi)


def small_problem(seed, n=3, k1=2, k2=0, p=1):
    rng = RngHandle(seed, "data")
    X = rng.child(0).generator().uniform(-1.0, 1.0, size=(n, p))
    Y = rng.child(1).generator().normal(8.0, 2.0, size=(n, 1))
    cfg = HypothesisConfig(1, k1, k2, p, 50.0)
    return smm.Problem(Dataset(X, Y), cfg, costs.newsvendor(8.0, 2.0))


# ---------------------------------------------------------------------------
# surrogation report

def test_surrogation_report_thresholds():
    rep = diagnostics.SurrogationReport(10, 1e-12, 1e-9, 1e-9, 0.0)
    assert rep.ok()
    assert not diagnostics.SurrogationReport(10, 2e-12, 0.0, 0.0, 0.0).ok()
    assert not diagnostics.SurrogationReport(10, 0.0, 2e-9, 0.0, 0.0).ok()
    assert not diagnostics.SurrogationReport(10, 0.0, 0.0, 2e-9, 0.0).ok()
    assert diagnostics.SurrogationReport(10, 1e-3, 0.0, 0.0, 0.0).ok(touch_tol=1e-2)


def test_check_surrogation_counts_probes():
    problem = small_problem(0)
    rep = diagnostics.check_surrogation(problem, probes=17, rng=RngHandle(0, "index"))
    assert rep.probes == 17
    assert rep.epsilon == 0.0
    assert rep.ok()


# ---------------------------------------------------------------------------
# stationarity residuals

def test_residual_zero_at_flat_minimizer():
    problem = quantile_problem()
    theta = intercept_theta(problem, flat_minimizer(problem))
    rep = diagnostics.residual_exact(problem, theta, 0.0, 0.6)
    assert rep.exact
    assert rep.mapping_count == 1.0
    assert rep.residual <= 1e-3
    assert rep.step_norms is not None and len(rep.step_norms) == 1


def test_residual_positive_away_from_minimizer():
    problem = quantile_problem()
    theta = intercept_theta(problem, flat_minimizer(problem) - 2.0)
    rep = diagnostics.residual_exact(problem, theta, 0.0, 0.6)
    assert rep.residual > 0.01


def test_residual_report_dict():
    problem = quantile_problem()
    theta = intercept_theta(problem, flat_minimizer(problem))
    rep = diagnostics.residual_exact(problem, theta, 0.0, 0.6)
    d = rep.to_dict()
    assert set(d) == {"epsilon", "rho", "mapping_count", "exact", "residual", "std_error"}
    assert d["exact"] is True


def test_mapping_count_enumeration():
    # two samples, two convex pieces, everything active: 2 * 2 = 4 mappings
    problem = small_problem(1, n=2, k1=2, k2=0)
    theta = random_init(problem.cfg, RngHandle(5, "init"))
    eps = diagnostics.eps_all_threshold(problem.cfg, problem.data)
    sets = rules.active_sets(theta, problem.data, eps)
    assert sets.mapping_count() == 4.0
    rep = diagnostics.residual_exact(problem, theta, eps, 0.5)
    assert rep.mapping_count == 4.0
    assert len(rep.step_norms) == 4
    assert all(s >= 0.0 for s in rep.step_norms)


def test_residual_exact_cap():
    problem = small_problem(2, n=8, k1=3, k2=2)
    theta = random_init(problem.cfg, RngHandle(6, "init"))
    eps = diagnostics.eps_all_threshold(problem.cfg, problem.data)
    with pytest.raises(ValueError, match="cap"):
        diagnostics.residual_exact(problem, theta, eps, 0.5, cap=10_000)


def test_sampled_residual_matches_exact_for_single_mapping():
    problem = quantile_problem()
    theta = intercept_theta(problem, flat_minimizer(problem) - 1.0)
    exact = diagnostics.residual_exact(problem, theta, 0.0, 0.6)
    sampled = diagnostics.residual_sampled(problem, theta, 0.0, 0.6, draws=3,
                                           rng=RngHandle(3, "index"))
    assert not sampled.exact
    assert sampled.residual == pytest.approx(exact.residual, abs=1e-12)
    assert sampled.std_error == 0.0


def test_sampled_residual_deterministic():
    problem = small_problem(3, n=4, k1=2, k2=1)
    theta = random_init(problem.cfg, RngHandle(7, "init"))
    a = diagnostics.residual_sampled(problem, theta, 1.0, 0.5, draws=8,
                                     rng=RngHandle(9, "index"))
    b = diagnostics.residual_sampled(problem, theta, 1.0, 0.5, draws=8,
                                     rng=RngHandle(9, "index"))
    assert a.residual == b.residual
    assert a.std_error == b.std_error


# ---------------------------------------------------------------------------
# interpolation

def test_interpolate_abs_value_exact_at_nodes():
    f0 = lambda X: np.abs(X[:, 0])
    theta, report = diagnostics.interpolate_pa(f0, 1.0, 2.0, 1, 0.5, 2.0)
    spacing = report.spacing
    nodes = (-2.0 + spacing * (np.arange(report.nodes_per_axis) + 0.5))[:, None]
    got = rules.decisions(theta, nodes)[:, 0]
    np.testing.assert_allclose(got, f0(nodes), atol=1e-9)


@pytest.mark.parametrize("grid_eps", [0.5, 0.25, 0.1])
def test_interpolate_abs_value_certified_bounds(grid_eps):
    f0 = lambda X: np.abs(X[:, 0])
    theta, report = diagnostics.interpolate_pa(f0, 1.0, 2.0, 1, grid_eps, 2.0)
    xs = np.linspace(-2.0, 2.0, 2001)[:, None]
    vals = rules.decisions(theta, xs)[:, 0]
    sup_err = float(np.max(np.abs(vals - f0(xs))))
    assert sup_err <= report.sup_error_bound
    num_lip = float(np.max(np.abs(np.diff(vals)) / np.diff(xs[:, 0])))
    assert num_lip <= report.lipschitz_bound + 1e-6
    assert report.lipschitz_bound == pytest.approx((np.sqrt(1) + 2.0) * 1.0)


def test_interpolate_refinement_tightens_error():
    f0 = lambda X: np.sin(np.pi * X[:, 0])
    xs = np.linspace(-1.0, 1.0, 1501)[:, None]
    errs = []
    for grid_eps in (0.5, 0.25, 0.1):
        theta, report = diagnostics.interpolate_pa(f0, np.pi, 1.0, 1, grid_eps, 1.0)
        vals = rules.decisions(theta, xs)[:, 0]
        errs.append(float(np.max(np.abs(vals - f0(xs)))))
        assert errs[-1] <= report.sup_error_bound
    assert errs[2] < errs[0]


def test_interpolate_two_dim_max_affine():
    # a target already piecewise affine in two variables
    W = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    b = np.array([0.0, 0.0, 0.2])
    f0 = lambda X: (X @ W.T + b).max(axis=1)
    L0 = float(np.max(np.linalg.norm(W, axis=1)))
    theta, report = diagnostics.interpolate_pa(f0, L0, 1.5, 2, 0.5, 1.0)
    gen = RngHandle(4, "data").generator()
    xs = gen.uniform(-1.0, 1.0, size=(400, 2))
    vals = rules.decisions(theta, xs)[:, 0]
    assert float(np.max(np.abs(vals - f0(xs)))) <= report.sup_error_bound
    assert report.lipschitz_bound == pytest.approx((np.sqrt(2) + 2.0) * L0)


def test_interpolate_validation():
    f0 = lambda X: np.abs(X[:, 0])
    with pytest.raises(ValueError, match="> 0"):
        diagnostics.interpolate_pa(f0, 1.0, 2.0, 1, 0.0, 2.0)
    with pytest.raises(ValueError, match="p must be"):
        diagnostics.interpolate_pa(f0, 1.0, 2.0, 0, 0.5, 2.0)
    with pytest.raises(ValueError, match="declared bound"):
        diagnostics.interpolate_pa(f0, 1.0, 0.1, 1, 0.5, 2.0)


# ---------------------------------------------------------------------------
# epsilon saturation and directional probe

def test_eps_all_threshold_intercept_rule():
    cfg = HypothesisConfig(1, 1, 0, 0, 50.0)
    data = Dataset(np.zeros((4, 0)), np.ones((4, 1)))
    assert diagnostics.eps_all_threshold(cfg, data) == pytest.approx(100.0)


def test_eps_all_threshold_saturates_active_sets():
    problem = small_problem(4, n=5, k1=2, k2=1)
    eps = diagnostics.eps_all_threshold(problem.cfg, problem.data)
    for s in range(3):
        theta = random_init(problem.cfg, RngHandle(s, "init"))
        sets = rules.active_sets(theta, problem.data, eps)
        assert np.all(sets.convex_mask)
        assert np.all(sets.concave_mask)


def test_directional_probe_at_flat_minimizer():
    problem = quantile_problem()
    theta = intercept_theta(problem, flat_minimizer(problem))
    slope = diagnostics.directional_probe(problem, theta, rng=RngHandle(1, "output"))
    assert slope >= -1e-9


def test_directional_probe_detects_descent():
    problem = quantile_problem()
    theta = intercept_theta(problem, flat_minimizer(problem) - 2.0)
    slope = diagnostics.directional_probe(problem, theta, rng=RngHandle(1, "output"))
    assert slope < -0.1


def test_directional_probe_deterministic():
    problem = small_problem(5, n=4, k1=2, k2=1)
    theta = random_init(problem.cfg, RngHandle(2, "init"))
    a = diagnostics.directional_probe(problem, theta, rng=RngHandle(3, "output"))
    b = diagnostics.directional_probe(problem, theta, rng=RngHandle(3, "output"))
    assert a == b
