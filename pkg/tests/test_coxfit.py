import math
import warnings

import numpy as np
import pytest

import oracles
from conftest import random_intervals
from reciprocity.coxfit import (CoxError, fit, gradient_and_hessian, neg_log_partial_likelihood,
                                predict_baseline_hazard, prepare, robust_covariance,
                                score_residuals)


def test_constant_column_dropped_with_warning():
    data = prepare(([0, 0, 0], [1, 2, 3], [1, 0, 1], [[1, 0.2], [1, 0.5], [1, 0.9]]), ["one", "x"])
    assert data.names == ["x"]
    assert data.dropped == ["one"]
    assert any("one" in w for w in data.warnings)


def test_binary_column_centred():
    data = prepare(([0, 0], [1, 2], [1, 1], [[0.0], [1.0]]), ["x"])
    np.testing.assert_allclose(data.X[:, 0], [-0.5, 0.5], atol=0)
    assert data.centering[0] == 0.5


def test_prepared_columns_have_zero_mean():
    X = np.array([[1.0, 3.0], [2.0, -1.0], [0.5, 7.0], [4.0, 2.0]])
    data = prepare(([0, 0, 1, 2], [1, 2, 3, 4], [1, 0, 1, 1], X), ["a", "b"])
    assert np.abs(data.X.mean(axis=0)).max() < 1e-12


def test_uniform_risk_set_log_likelihood():
    data = prepare(([0, 0, 0], [1, 2, 2], [1, 0, 0], [[0.1], [0.4], [-0.3]]), ["x"])
    assert neg_log_partial_likelihood(data, [0.0]) == pytest.approx(math.log(3), abs=1e-15)


def test_two_events_match_enumeration():
    start, stop, event = [0, 0, 1, 0], [2, 3, 3, 1.5], [1, 1, 0, 0]
    X = [[0.3], [1.2], [-0.7], [0.0]]
    data = prepare((start, stop, event, X), ["x"])
    expect = oracles.efron_nll(start, stop, event, X, [0.5])
    assert neg_log_partial_likelihood(data, [0.5]) == pytest.approx(expect, abs=1e-12)


def test_ties_match_enumeration(rng):
    for _ in range(10):
        start, stop, event, X = random_intervals(rng, 15, 3)
        data = prepare((start, stop, event, X))
        beta = rng.normal(scale=0.5, size=3)
        expect = oracles.efron_nll(start, stop, event, X, beta, 0.01)
        got = neg_log_partial_likelihood(data, beta, 0.01)
        assert got == pytest.approx(expect, abs=1e-10)


def test_penalty_arithmetic():
    data = prepare(([0, 0, 0], [1, 2, 3], [1, 1, 0], [[0.0], [1.0], [0.5]]), ["x"])
    base = neg_log_partial_likelihood(data, [2.0], 0.0)
    assert neg_log_partial_likelihood(data, [2.0], 0.01) - base == pytest.approx(0.02, abs=1e-14)


def test_gradient_zero_for_exchangeable_groups():
    # two mirror-image groups: the score at beta=0 vanishes by symmetry
    start = [0, 0, 0, 0]
    stop = [1, 1, 2, 2]
    event = [1, 1, 1, 1]
    X = [[1.0], [-1.0], [1.0], [-1.0]]
    grad, _ = gradient_and_hessian(prepare((start, stop, event, X)), [0.0])
    assert np.abs(grad).max() < 1e-15


def test_gradient_and_hessian_match_finite_differences(rng):
    start, stop, event, X = random_intervals(rng, 10, 2)
    data = prepare((start, stop, event, X))
    beta = np.array([0.3, -0.4])
    f = lambda b: neg_log_partial_likelihood(data, b, 5e-3)  # noqa: E731
    g = lambda b: gradient_and_hessian(data, b, 5e-3)[0]  # noqa: E731
    grad, hess = gradient_and_hessian(data, beta, 5e-3)
    assert np.abs(grad - oracles.central_gradient(f, beta)).max() < 1e-6
    assert np.abs(hess - oracles.central_jacobian(g, beta)).max() < 1e-4
    assert np.allclose(hess, hess.T)
    assert np.linalg.eigvalsh(hess).min() >= 5e-3 - 1e-12


def test_non_finite_linear_predictor_names_row():
    data = prepare(([0, 0], [1, 2], [1, 0], [[0.0], [1.0]]), ["x"])
    with pytest.raises(CoxError, match="row"):
        neg_log_partial_likelihood(data, [np.inf])


def test_no_events_rejected():
    with pytest.raises(CoxError, match="no events"):
        prepare(([0, 0], [1, 2], [0, 0], [[0.0], [1.0]]))


def test_negative_penalizer_rejected():
    data = prepare(([0, 0], [1, 2], [1, 0], [[0.0], [1.0]]))
    with pytest.raises(CoxError):
        neg_log_partial_likelihood(data, [0.0], -1.0)


def test_hazard_ratio_reporting_matches_published_pooled_estimate():
    from reciprocity.coxfit import FitResult
    res = FitResult(["is_treated_active"], np.array([0.0562]), np.array([0.0072]),
                    0.0, 1, True, 5e-3)
    assert res.hazard_ratios[0] == pytest.approx(1.0578, abs=5e-5)
    assert round(res.ci_lower[0], 2) == 1.04
    assert round(res.ci_upper[0], 2) == 1.07
    assert res.hazard_ratios[0] == math.exp(0.0562)


def test_identical_patterns_give_null_effect(rng):
    n = 60
    stop = rng.integers(1, 20, n).astype(float)
    event = rng.random(n) < 0.7
    start = np.zeros(n)
    # every treated row has an untreated twin with the same history
    data = prepare((np.r_[start, start], np.r_[stop, stop], np.r_[event, event],
                    np.r_[np.ones(n), np.zeros(n)][:, None]), ["treatment"])
    res = fit(data)
    assert abs(res.coefficients[0]) < 2 * res.standard_errors[0]
    assert abs(res.coefficients[0]) < 1e-8


def test_fit_agrees_with_dense_optimizer(rng):
    start, stop, event, X = random_intervals(rng, 20, 2)
    data = prepare((start, stop, event, X))
    res = fit(data, penalizer=5e-3)
    ref = oracles.minimize_dense(lambda b: oracles.efron_nll(start, stop, event, X, b, 5e-3), 2)
    assert res.converged
    assert np.abs(res.coefficients - ref).max() < 1e-4


def test_objective_monotone_and_gradient_small(rng):
    start, stop, event, X = random_intervals(rng, 25, 3)
    data = prepare((start, stop, event, X))
    res = fit(data, penalizer=5e-3, tol=1e-9)
    hist = res.diagnostics["objective_history"]
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    grad, _ = gradient_and_hessian(data, res.coefficients, 5e-3)
    assert np.abs(grad).max() < 10 * 1e-9 * max(1.0, abs(res.objective))


def test_fit_result_invariants(rng):
    data = prepare(random_intervals(rng, 25, 2))
    res = fit(data)
    assert np.array_equal(res.hazard_ratios, np.exp(res.coefficients))
    np.testing.assert_allclose(res.ci_lower, np.exp(res.coefficients - 1.959963984540054 * res.standard_errors))
    table = res.to_dict()["coefficients"]
    assert {"name", "coef", "se", "hr", "ci_lower", "ci_upper", "p"} <= set(table[0])


def test_centering_invariance(rng):
    start, stop, event, X = random_intervals(rng, 20, 2)
    beta = np.array([0.4, -0.2])
    shifted = X + np.array([5.0, -3.0])
    a = oracles.efron_nll(start, stop, event, X, beta)
    b = neg_log_partial_likelihood(prepare((start, stop, event, shifted)), beta)
    assert abs(a - b) < 1e-10


def test_scaling_covariate_rescales_coefficient(rng):
    start, stop, event, X = random_intervals(rng, 30, 2)
    r1 = fit(prepare((start, stop, event, X)), penalizer=0.0, tol=1e-12)
    X2 = X.copy()
    X2[:, 1] *= 4.0
    r2 = fit(prepare((start, stop, event, X2)), penalizer=0.0, tol=1e-12)
    assert r2.coefficients[1] == pytest.approx(r1.coefficients[1] / 4.0, abs=1e-6)
    assert r2.coefficients[0] == pytest.approx(r1.coefficients[0], abs=1e-6)


def test_non_convergence_reported(rng):
    data = prepare(random_intervals(rng, 20, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = fit(data, max_iter=1, tol=1e-14)
    assert not res.converged


def test_unidentified_column_flagged():
    # column is a function of time only: every row at risk shares its value
    start = np.array([0, 0, 2, 2], float)
    stop = np.array([2, 2, 4, 4], float)
    event = np.array([1, 0, 1, 1], bool)
    X = np.column_stack([(start >= 2).astype(float), [0.0, 1.0, 0.0, 1.0]])
    res = fit(prepare((start, stop, event, X), ["late", "x"]))
    assert res.diagnostics["unidentified"] == ["late"]
    assert "not identified" in res.summary()


def test_baseline_hazard_zero_before_first_event():
    data = prepare(([0, 0, 0], [2, 3, 4], [0, 1, 0], [[0.0], [1.0], [2.0]]), ["x"])
    res = fit(data)
    H = predict_baseline_hazard(data, res)
    assert H(2.999) == 0.0
    assert H(3.0) > 0


def test_baseline_single_event_uniform_jump():
    data = prepare(([0] * 4, [5, 5, 5, 5], [1, 0, 0, 0], [[0.0], [1.0], [2.0], [3.0]]), ["x"])
    from reciprocity.coxfit import FitResult
    zero = FitResult(["x"], np.zeros(1), np.ones(1), 0.0, 0, True, 0.0)
    assert predict_baseline_hazard(data, zero)(5.0) == pytest.approx(0.25, abs=1e-15)


def test_baseline_matches_breslow_hand_sums(rng):
    start, stop, event, X = random_intervals(rng, 12, 2)
    data = prepare((start, stop, event, X))
    res = fit(data)
    times, expect = oracles.breslow_cumhaz(start, stop, event, X, res.coefficients)
    H = predict_baseline_hazard(data, res)
    np.testing.assert_allclose(H(times), expect, rtol=0, atol=1e-12)
    assert np.all(np.diff(H(np.linspace(0, 12, 200))) >= 0)


def test_score_residuals_match_enumeration(rng):
    for _ in range(5):
        start, stop, event, X = random_intervals(rng, 14, 2)
        data = prepare((start, stop, event, X))
        beta = rng.normal(scale=0.4, size=2)
        expect = oracles.efron_score_residuals(start, stop, event, X, beta)
        np.testing.assert_allclose(score_residuals(data, beta), expect, atol=1e-12)


def test_robust_covariance_single_cluster_collapses(rng):
    start, stop, event, X = random_intervals(rng, 20, 2)
    data = prepare((start, stop, event, X))
    res = fit(data, penalizer=0.0, tol=1e-12)
    _, H = gradient_and_hessian(data, res.coefficients, 0.0)
    # all rows in one cluster: the summed score is ~0 at the unpenalised optimum
    V = robust_covariance(data, res.coefficients, H, np.zeros(len(start)))
    assert np.abs(V).max() < 1e-12
    V_rows = robust_covariance(data, res.coefficients, H)
    assert np.all(np.diag(V_rows) > 0)


def test_objective_bitwise_deterministic(rng):
    data = prepare(random_intervals(rng, 200, 3))
    beta = np.array([0.1, -0.2, 0.3])
    values = {neg_log_partial_likelihood(data, beta) for _ in range(5)}
    grads = {gradient_and_hessian(data, beta)[0].tobytes() for _ in range(5)}
    assert len(values) == 1 and len(grads) == 1
