import numpy as np
import pandas as pd
import pytest
from scipy.stats import truncnorm

from gformula.models.formula import DesignMatrix
from gformula.services.formula_dsl import parse_formula
from gformula.services.model_fitting import (
    DegreesOfFreedomError,
    ModelFitError,
    ShapeError,
    fit_binomial,
    fit_formula,
    fit_gaussian,
    fit_multinomial,
    fit_truncated_normal,
    predict,
    truncnorm_gradient,
    truncnorm_loglik,
)


def _design(columns, response, names=None):
    values = np.column_stack(columns).astype(float)
    names = names or ["(Intercept)"] + [f"x{i}" for i in range(1, values.shape[1])]
    return DesignMatrix(column_names=names, values=values, response=np.asarray(response))


def test_logistic_matches_two_by_two_log_odds():
    x = np.repeat([0.0, 1.0], 10)
    y = np.zeros(20)
    y[:1] = 1.0
    y[10:13] = 1.0
    model = fit_binomial(_design([np.ones(20), x], y))
    assert model.diagnostics.converged
    assert model.coefficients[0] == pytest.approx(np.log(1 / 9), abs=1e-6)
    assert model.coefficients[1] == pytest.approx(np.log(27 / 7), abs=1e-6)
    assert model.coefficients == pytest.approx([-2.19722, 1.34993], abs=1e-5)


def test_probit_link_recovers_proportions():
    y = np.array([1.0, 0.0, 0.0, 0.0])
    model = fit_binomial(_design([np.ones(4)], y), link="probit")
    assert predict(model, np.array([1.0])) == pytest.approx(0.25, abs=1e-8)


def test_separation_is_reported_not_raised():
    x = np.array([0.0, 0.0, 1.0, 1.0])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    model = fit_binomial(_design([np.ones(4), x], y))
    assert not model.diagnostics.converged
    assert "separation" in model.diagnostics.message


def test_binomial_fit_follows_an_affine_rescaling_of_a_predictor():
    rng = np.random.default_rng(5)
    x = rng.normal(size=500)
    y = (rng.random(500) < 1.0 / (1.0 + np.exp(0.2 - 0.9 * x))).astype(float)
    original = fit_binomial(_design([np.ones(500), x], y))
    rescaled_design = _design([np.ones(500), 4.0 * x - 7.0], y)
    rescaled = fit_binomial(rescaled_design)
    np.testing.assert_allclose(
        predict(rescaled, rescaled_design.values), predict(original, _design([np.ones(500), x], y).values), atol=1e-6
    )
    assert rescaled.coefficients[1] == pytest.approx(original.coefficients[1] / 4.0, rel=1e-5)
    assert rescaled.stderrs[1] == pytest.approx(original.stderrs[1] / 4.0, rel=1e-4)


def test_binomial_rejects_non_binary_response():
    with pytest.raises(ModelFitError, match="0/1"):
        fit_binomial(_design([np.ones(3)], [0.0, 2.0, 1.0]))


def test_gaussian_intercept_only():
    model = fit_gaussian(_design([np.ones(3)], [1.0, 2.0, 3.0]))
    assert model.coefficients[0] == pytest.approx(2.0)
    assert model.residual_mse == pytest.approx(1.0)
    assert model.diagnostics.rmse == pytest.approx(np.sqrt(2 / 3))


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(50), rng.normal(size=50), rng.normal(size=50)])
    y = X @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=50)
    model = fit_gaussian(_design([X[:, 0], X[:, 1], X[:, 2]], y))
    expected = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(model.coefficients, expected, rtol=0, atol=1e-10)


def test_gaussian_needs_more_records_than_coefficients():
    with pytest.raises(DegreesOfFreedomError):
        fit_gaussian(_design([np.ones(2), [0.0, 1.0]], [1.0, 2.0]))


def test_rank_deficiency_names_aliased_columns():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    design = _design([np.ones(4), x, 2 * x], [0.0, 1.0, 0.0, 1.0], ["(Intercept)", "L", "L2"])
    with pytest.raises(ModelFitError, match="aliased columns: L"):
        fit_binomial(design)


def test_intercept_only_multinomial_matches_proportions():
    response = np.array(["a"] * 2 + ["b"] * 3 + ["c"] * 5, dtype=object)
    model = fit_multinomial(_design([np.ones(10)], response), ("a", "b", "c"))
    assert predict(model, np.array([1.0])) == pytest.approx([0.2, 0.3, 0.5], abs=1e-6)
    assert set(model.coefficient_table()) == {"b:(Intercept)", "c:(Intercept)"}


def test_multinomial_needs_three_levels():
    with pytest.raises(ModelFitError, match="at least 3 levels"):
        fit_multinomial(_design([np.ones(2)], np.array(["a", "b"], dtype=object)), ("a", "b"))


def test_truncated_normal_without_truncation_is_ols():
    rng = np.random.default_rng(2)
    x = rng.normal(size=200)
    y = 1.0 + 0.5 * x + rng.normal(size=200)
    design = _design([np.ones(200), x], y)
    model = fit_truncated_normal(design, -np.inf, "left")
    ols = np.linalg.lstsq(design.values, y, rcond=None)[0]
    np.testing.assert_allclose(model.coefficients, ols, atol=1e-6)
    assert model.residual_mse == pytest.approx(np.mean((y - design.values @ ols) ** 2), abs=1e-6)


def test_truncated_normal_gradient_vanishes_at_the_optimum():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, size=300)
    mean = 0.5 + x
    y = truncnorm.rvs(-mean, np.inf, loc=mean, scale=1.0, random_state=rng)
    design = _design([np.ones(300), x], y)
    model = fit_truncated_normal(design, 0.0, "left")
    theta = np.append(model.coefficients, np.log(model.sigma))
    gradient = truncnorm_gradient(theta, design.values, y, 0.0, "left")
    assert np.max(np.abs(gradient)) < 1e-6

    step = 1e-6
    numeric = np.array(
        [
            (
                truncnorm_loglik(theta + step * unit, design.values, y, 0.0, "left")
                - truncnorm_loglik(theta - step * unit, design.values, y, 0.0, "left")
            )
            / (2 * step)
            for unit in np.eye(len(theta))
        ]
    )
    assert np.max(np.abs(numeric)) < 1e-3


def test_truncated_normal_recovers_a_known_generator():
    rng = np.random.default_rng(11)
    n, beta, sigma = 5000, np.array([0.3, 1.0]), 1.5
    x = rng.normal(size=n)
    mean = beta[0] + beta[1] * x
    y = truncnorm.rvs(-mean / sigma, np.inf, loc=mean, scale=sigma, random_state=rng)
    model = fit_truncated_normal(_design([np.ones(n), x], y), 0.0, "left")
    assert model.diagnostics.converged
    assert np.all(np.abs(model.coefficients - beta) <= 3 * model.stderrs)
    assert model.sigma == pytest.approx(sigma, rel=0.06)


def test_truncated_normal_rejects_responses_beyond_the_point():
    with pytest.raises(ModelFitError, match="left truncation"):
        fit_truncated_normal(_design([np.ones(3)], [-1.0, 1.0, 2.0]), 0.0, "left")


def test_predict_checks_row_width():
    model = fit_gaussian(_design([np.ones(3)], [1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        predict(model, np.array([1.0, 2.0]))


def test_fit_formula_labels_errors_and_models():
    records = pd.DataFrame({"Y": [0.0, 1.0, 0.0, 1.0, 1.0], "L": [0.0, 1.0, 1.0, 0.0, 2.0]})
    model = fit_formula(parse_formula("Y ~ L"), records, {}, "binomial", label="outcome")
    assert model.label == "outcome"
    assert model.column_names == ["(Intercept)", "L"]
    with pytest.raises(ModelFitError, match="^outcome: unknown family"):
        fit_formula(parse_formula("Y ~ L"), records, {}, "poisson", label="outcome")
