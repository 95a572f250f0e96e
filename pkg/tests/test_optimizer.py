import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clssem.estimator import estimate
from clssem.model import Dataset, parse_model
from clssem.objective import Objective
from clssem.optimizer import (INDEFINITE, POSITIVE_DEFINITE, SEMI_DEFINITE,
                              InitializationError, OptimizerConfig, classify_eigenvalues,
                              local_uniqueness, maximize_on_simplex, minimize,
                              project_to_simplex)
from clssem.oracle import orthogonal_regression, reflective_scores
from clssem.weights import angle_criterion

from conftest import regression_data


class Bowl:
    """``(x - c)' A (x - c)`` with a known minimum."""

    def __init__(self, A, c):
        self.A, self.c = np.asarray(A, float), np.asarray(c, float)
        self.size = self.c.size

    def value(self, x):
        d = x - self.c
        return float(d @ self.A @ d)

    def value_and_gradient(self, x):
        d = x - self.c
        return float(d @ self.A @ d), 2 * self.A @ d


class Nowhere:
    size = 2

    def value(self, x):
        return np.nan

    def value_and_gradient(self, x):
        return np.nan, np.full(2, np.nan)


def test_config_validation():
    for bad in ({"gtol": 0}, {"multistart": 0}, {"max_iter": 0}, {"ftol": -1}):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)


def test_quadratic_bowl():
    A = np.array([[3.0, 1.0, 0.0], [1.0, 2.0, 0.5], [0.0, 0.5, 1.0]])
    c = np.array([1.0, -2.0, 0.5])
    res = minimize(Bowl(A, c), OptimizerConfig(multistart=3, gtol=1e-12))
    np.testing.assert_allclose(res.x, c, atol=1e-10)
    assert res.converged
    assert len(res.starts) == 3


def test_regression_matches_closed_form(regression_model):
    data = regression_data(60, seed=4)
    res = estimate(regression_model, data, "w1", OptimizerConfig(multistart=2))
    a, Z = orthogonal_regression(data.column("x"), data.column("y"))
    assert res.params["a"] == pytest.approx(a, abs=1e-6)
    np.testing.assert_allclose(res.latent_scores[:, 0], Z, atol=1e-6)


def test_reflective_scores_match_composite():
    model = parse_model("latent: Z\nmanifest: x1, x2, x3\nparam: l2, l3\n"
                        "eq x1: x1 = Z\neq x2: x2 = l2*Z\neq x3: x3 = l3*Z\n")
    rng = np.random.default_rng(3)
    eta = rng.standard_normal(40)
    data = Dataset.from_mapping({f"x{j + 1}": lam * eta + 0.3 * rng.standard_normal(40)
                                 for j, lam in enumerate((1.0, 0.6, 1.4))})
    res = estimate(model, data, "w1", OptimizerConfig(multistart=2))
    lam = [1.0, res.params["l2"], res.params["l3"]]
    np.testing.assert_allclose(res.latent_scores[:, 0], reflective_scores(data.values, lam),
                               atol=1e-6)


def test_all_starts_non_finite():
    with pytest.raises(InitializationError):
        minimize(Nowhere(), OptimizerConfig(multistart=2, init_retries=2))


def test_iteration_limit_reported():
    A = np.diag([1.0, 1e4])
    res = minimize(Bowl(A, [3.0, 3.0]), OptimizerConfig(multistart=1, max_iter=1, gtol=1e-14))
    assert not res.converged
    assert res.starts[0].iterations <= 1


def test_deterministic_for_seed(regression_model):
    data = regression_data(20, seed=1)
    obj = Objective(regression_model, data)
    cfg = OptimizerConfig(multistart=4, seed=7)
    x0 = np.r_[1.0, data.column("x")]
    r1, r2 = minimize(obj, cfg, x0), minimize(obj, cfg, x0)
    np.testing.assert_array_equal(r1.x, r2.x)
    assert [s.f_final for s in r1.starts] == [s.f_final for s in r2.starts]


def test_result_not_worse_than_any_start(regression_model):
    data = regression_data(20, seed=2)
    obj = Objective(regression_model, data)
    res = minimize(obj, OptimizerConfig(multistart=5), np.r_[-1.0, np.zeros(20)])
    assert res.fun == pytest.approx(obj.value(res.x), rel=1e-15)
    assert all(res.fun <= s.f_start for s in res.starts)
    assert res.best_start == min(res.starts, key=lambda s: s.f_final).index


def test_restart_from_solution_is_stable(regression_model):
    data = regression_data(30, seed=3)
    obj = Objective(regression_model, data)
    cfg = OptimizerConfig(multistart=1)
    first = minimize(obj, cfg, np.r_[1.0, data.column("x")])
    again = minimize(obj, cfg, first.x)
    assert abs(again.fun - first.fun) <= 1e-12 * first.fun


@given(st.integers(0, 10_000))
def test_bowl_minimum_property(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((3, 3))
    A = M @ M.T + 0.5 * np.eye(3)
    c = rng.standard_normal(3)
    res = minimize(Bowl(A, c), OptimizerConfig(multistart=1, gtol=1e-12),
                   rng.standard_normal(3))
    np.testing.assert_allclose(res.x, c, atol=1e-7)


# -- local uniqueness ------------------------------------------------------

def test_identified_regression_is_positive_definite(regression_model):
    data = regression_data(30, seed=5)
    res = estimate(regression_model, data, "w1", OptimizerConfig(multistart=1))
    assert res.uniqueness == POSITIVE_DEFINITE


def test_product_parameters_not_definite():
    model = parse_model("latent: Z\nmanifest: x, y\nparam: p, q\n"
                        "eq x: x = Z\neq y: y = p*q*Z\n")
    data = regression_data(30, seed=5)
    res = estimate(model, data, "w1", OptimizerConfig(multistart=1))
    assert res.uniqueness in (SEMI_DEFINITE, INDEFINITE)


def test_single_case_single_latent():
    model = parse_model("latent: Z\nmanifest: x1\neq e: x1 = Z\n")
    obj = Objective(model, Dataset.from_mapping({"x1": [2.0]}))
    assert local_uniqueness(obj, np.array([2.0])) == POSITIVE_DEFINITE


def test_classify_eigenvalues():
    assert classify_eigenvalues([1.0, 2.0]) == POSITIVE_DEFINITE
    assert classify_eigenvalues([0.0, 2.0]) == SEMI_DEFINITE
    assert classify_eigenvalues([-1.0, 2.0]) == INDEFINITE
    assert classify_eigenvalues([np.nan]) == "unknown"


# -- simplex search --------------------------------------------------------

def test_angle_stub_maximized_at_reciprocal_variances():
    sigma = np.array([0.1, 0.2, 0.4])
    target = sigma**-2 / np.sum(sigma**-2)
    assert angle_criterion(target, sigma) == pytest.approx(1.0, abs=1e-12)
    res = maximize_on_simplex(lambda w: angle_criterion(w, sigma), 3, budget=400)
    assert res.value == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(res.weights, target, atol=1e-2)


def test_singleton_simplex():
    calls = []
    res = maximize_on_simplex(lambda w: calls.append(w) or 0.0, 1)
    np.testing.assert_array_equal(res.weights, [1.0])
    assert res.evaluations == 0 and not calls


def test_concave_maximum_recovered():
    c = np.array([0.2, 0.5, 0.3])
    res = maximize_on_simplex(lambda w: -np.sum((w - c) ** 2), 3, budget=400)
    np.testing.assert_allclose(res.weights, c, atol=1e-3)


def test_budget_exhaustion_flagged():
    c = np.array([0.1, 0.2, 0.3, 0.4])
    res = maximize_on_simplex(lambda w: -np.sum((w - c) ** 2), 4, budget=5)
    assert res.exhausted
    assert res.evaluations <= 6
    assert res.weights.sum() == pytest.approx(1.0)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_projection_feasible(x):
    w = project_to_simplex(np.array(x))
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= 1e-6 - 1e-15)
