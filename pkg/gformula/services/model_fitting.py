import logging
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import expit, log_ndtr, logsumexp, ndtr, xlogy
from scipy.stats import norm

from gformula.errors import GFormulaError
from gformula.models.fitted import FittedModel, ModelDiagnostics
from gformula.models.formula import DesignMatrix, ModelFormula
from gformula.services.formula_dsl import build_design, collect_levels

logger = logging.getLogger(__name__)

MAX_GLM_ITERATIONS = 100
MAX_TRUNCNORM_ITERATIONS = 200
COEF_TOLERANCE = 1e-8
DEVIANCE_TOLERANCE = 1e-10
SEPARATION_EPS = 1e-10
_PROB_EPS = 1e-15


class ModelFitError(GFormulaError):
    module = "model_fitting"


class DegreesOfFreedomError(ModelFitError):
    pass


class ShapeError(GFormulaError):
    module = "model_fitting"


def check_rank(design: DesignMatrix) -> None:
    """Raise naming the aliased columns when the design is rank deficient"""
    X = design.values
    n, p = X.shape
    if n == 0:
        raise ModelFitError("no records to fit")
    R, pivots = linalg.qr(X, mode="r", pivoting=True)
    diagonal = np.abs(np.diag(R))
    tolerance = diagonal.max(initial=0.0) * max(n, p) * np.finfo(float).eps
    rank = int(np.sum(diagonal > tolerance))
    if rank < p:
        aliased = [design.column_names[i] for i in sorted(pivots[rank:])]
        raise ModelFitError(f"rank-deficient design; aliased columns: {', '.join(aliased)}")


def _safe_inverse(matrix: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(matrix)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(matrix)


def _stderrs(information: np.ndarray) -> np.ndarray:
    variance = np.diag(_safe_inverse(information))
    return np.sqrt(np.clip(variance, 0.0, None))


def _observed_range(y: np.ndarray) -> Tuple[float, float]:
    return (float(np.min(y)), float(np.max(y))) if len(y) else (float("nan"), float("nan"))


def _converged(beta: np.ndarray, previous: np.ndarray, deviance: float, old_deviance: float) -> bool:
    if np.max(np.abs(beta - previous)) < COEF_TOLERANCE:
        return True
    return abs(deviance - old_deviance) / (abs(deviance) + 0.1) < DEVIANCE_TOLERANCE


def _binomial_mean(eta: np.ndarray, link: str) -> Tuple[np.ndarray, np.ndarray]:
    if link == "logit":
        mu = expit(eta)
        return mu, mu * (1.0 - mu)
    return ndtr(eta), norm.pdf(eta)


def _binomial_link(mu: np.ndarray, link: str) -> np.ndarray:
    return np.log(mu / (1.0 - mu)) if link == "logit" else norm.ppf(mu)


def _binomial_loglik(y: np.ndarray, mu: np.ndarray) -> float:
    return float(np.sum(xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu)))


def fit_binomial(design: DesignMatrix, link: str = "logit") -> FittedModel:
    """Bernoulli maximum likelihood by iteratively reweighted least squares"""
    if link not in ("logit", "probit"):
        raise ModelFitError(f"binomial link must be logit or probit, got {link}")
    X = design.values
    y = np.asarray(design.response, dtype=float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ModelFitError("binomial response must be coded 0/1")
    check_rank(design)

    eta = _binomial_link((y + 0.5) / 2.0, link)
    beta = np.zeros(X.shape[1])
    deviance = np.inf
    converged = False
    iteration = 0
    for iteration in range(1, MAX_GLM_ITERATIONS + 1):
        mu, dmu = _binomial_mean(eta, link)
        mu = np.clip(mu, _PROB_EPS, 1.0 - _PROB_EPS)
        dmu = np.maximum(dmu, _PROB_EPS)
        weights = dmu**2 / (mu * (1.0 - mu))
        working = eta + (y - mu) / dmu
        root = np.sqrt(weights)
        updated = np.linalg.lstsq(X * root[:, None], working * root, rcond=None)[0]
        eta = X @ updated
        old_deviance = deviance
        deviance = -2.0 * _binomial_loglik(y, np.clip(_binomial_mean(eta, link)[0], _PROB_EPS, 1 - _PROB_EPS))
        previous, beta = beta, updated
        if iteration > 1 and _converged(beta, previous, deviance, old_deviance):
            converged = True
            break

    mu, dmu = _binomial_mean(eta, link)
    message = ""
    if np.any((mu < SEPARATION_EPS) | (mu > 1.0 - SEPARATION_EPS)):
        converged = False
        message = "fitted probabilities pinned at 0 or 1 (separation)"
    elif not converged:
        message = f"no convergence in {MAX_GLM_ITERATIONS} iterations"
    if message:
        logger.warning(f"Binomial fit: {message}")

    clipped = np.clip(mu, _PROB_EPS, 1.0 - _PROB_EPS)
    weights = np.maximum(dmu, _PROB_EPS) ** 2 / (clipped * (1.0 - clipped))
    information = X.T @ (X * weights[:, None])
    diagnostics = ModelDiagnostics(
        converged=converged,
        iterations=iteration,
        log_likelihood=_binomial_loglik(y, mu),
        rmse=float(np.sqrt(np.mean((y - mu) ** 2))),
        message=message,
    )
    return FittedModel(
        family="binomial",
        link=link,
        coefficients=beta,
        stderrs=_stderrs(information),
        column_names=list(design.column_names),
        n_obs=len(y),
        observed_range=_observed_range(y),
        diagnostics=diagnostics,
    )


def fit_gaussian(design: DesignMatrix, link: str = "identity") -> FittedModel:
    """Least squares (identity) or IRLS (log); dispersion uses n - p"""
    if link not in ("identity", "log"):
        raise ModelFitError(f"gaussian link must be identity or log, got {link}")
    X = design.values
    y = np.asarray(design.response, dtype=float)
    n, p = X.shape
    if n <= p:
        raise DegreesOfFreedomError(f"{n} records for {p} coefficients")
    check_rank(design)

    converged = True
    iteration = 1
    if link == "identity":
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
        mu = X @ beta
        information_weights = np.ones(n)
    else:
        if np.mean(y) <= 0:
            raise ModelFitError("log link needs a positive mean response")
        beta = np.zeros(p)
        beta[0] = np.log(np.mean(y))
        deviance = np.sum((y - np.exp(X @ beta)) ** 2)
        converged = False
        for iteration in range(1, MAX_GLM_ITERATIONS + 1):
            eta = X @ beta
            mu = np.exp(eta)
            working = eta + (y - mu) / mu
            updated = np.linalg.lstsq(X * mu[:, None], working * mu, rcond=None)[0]
            step = updated - beta
            new_deviance = np.sum((y - np.exp(X @ updated)) ** 2)
            halvings = 0
            while (not np.isfinite(new_deviance) or new_deviance > deviance) and halvings < 30:
                step /= 2.0
                updated = beta + step
                new_deviance = np.sum((y - np.exp(X @ updated)) ** 2)
                halvings += 1
            previous, beta = beta, updated
            old_deviance, deviance = deviance, new_deviance
            if _converged(beta, previous, deviance, old_deviance):
                converged = True
                break
        mu = np.exp(X @ beta)
        information_weights = mu**2
        if not converged:
            logger.warning(f"Gaussian log-link fit: no convergence in {MAX_GLM_ITERATIONS} iterations")

    residuals = y - mu
    rss = float(residuals @ residuals)
    mse = rss / (n - p)
    with np.errstate(divide="ignore"):
        log_likelihood = float(-0.5 * n * (np.log(2.0 * np.pi * rss / n) + 1.0))
    information = X.T @ (X * information_weights[:, None])
    diagnostics = ModelDiagnostics(
        converged=converged,
        iterations=iteration,
        log_likelihood=log_likelihood,
        rmse=float(np.sqrt(rss / n)),
    )
    return FittedModel(
        family="gaussian",
        link=link,
        coefficients=beta,
        stderrs=np.sqrt(mse) * _stderrs(information),
        column_names=list(design.column_names),
        n_obs=n,
        observed_range=_observed_range(y),
        diagnostics=diagnostics,
        residual_mse=mse,
    )


def _multinomial_probabilities(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    eta = np.hstack([np.zeros((X.shape[0], 1)), X @ B.T])
    return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


def fit_multinomial(design: DesignMatrix, levels: Sequence[str]) -> FittedModel:
    """Multinomial logit by Newton steps with halving; first level is the reference"""
    levels = tuple(levels)
    if len(levels) < 3:
        raise ModelFitError(f"multinomial fit needs at least 3 levels, got {len(levels)}")
    X = design.values
    response = np.asarray(design.response, dtype=object)
    unknown = sorted(set(response) - set(levels), key=str)
    if unknown:
        raise ModelFitError(f"response value '{unknown[0]}' not among levels {list(levels)}")
    Y = np.column_stack([response == level for level in levels]).astype(float)
    absent = [level for level, count in zip(levels, Y.sum(axis=0)) if count == 0]
    if absent:
        raise ModelFitError(f"level '{absent[0]}' absent from the fitting records")
    check_rank(design)

    n, p = X.shape
    m = len(levels) - 1
    B = np.zeros((m, p))

    def loglik(params: np.ndarray) -> float:
        eta = np.hstack([np.zeros((n, 1)), X @ params.T])
        return float(np.sum(Y * (eta - logsumexp(eta, axis=1, keepdims=True))))

    def information(P: np.ndarray) -> np.ndarray:
        blocks = np.zeros((m * p, m * p))
        for a in range(m):
            for b in range(m):
                weight = P[:, a + 1] * ((a == b) - P[:, b + 1])
                blocks[a * p : (a + 1) * p, b * p : (b + 1) * p] = X.T @ (X * weight[:, None])
        return blocks

    current = loglik(B)
    converged = False
    iteration = 0
    for iteration in range(1, MAX_GLM_ITERATIONS + 1):
        P = _multinomial_probabilities(X, B)
        gradient = (X.T @ (Y[:, 1:] - P[:, 1:])).T.ravel()
        step = np.linalg.lstsq(information(P), gradient, rcond=None)[0].reshape(m, p)
        candidate = B + step
        value = loglik(candidate)
        halvings = 0
        while value < current and halvings < 30:
            step /= 2.0
            candidate = B + step
            value = loglik(candidate)
            halvings += 1
        previous, B = B, candidate
        old, current = current, value
        if _converged(B, previous, -2.0 * current, -2.0 * old):
            converged = True
            break

    P = _multinomial_probabilities(X, B)
    message = ""
    if np.any(P < SEPARATION_EPS):
        converged = False
        message = "fitted probabilities pinned at 0 (separation)"
    elif not converged:
        message = f"no convergence in {MAX_GLM_ITERATIONS} iterations"
    if message:
        logger.warning(f"Multinomial fit: {message}")

    diagnostics = ModelDiagnostics(
        converged=converged,
        iterations=iteration,
        log_likelihood=current,
        rmse=float(np.sqrt(np.mean(np.sum((Y - P) ** 2, axis=1)))),
        message=message,
    )
    return FittedModel(
        family="multinomial",
        link="logit",
        coefficients=B,
        stderrs=_stderrs(information(P)).reshape(m, p),
        column_names=list(design.column_names),
        n_obs=n,
        observed_range=(float("nan"), float("nan")),
        diagnostics=diagnostics,
        levels=levels,
    )


def _truncation_terms(X, y, theta, point, direction):
    beta, s = theta[:-1], theta[-1]
    sigma = np.exp(s)
    mu = X @ beta
    r = (y - mu) / sigma
    d = 1.0 if direction == "left" else -1.0
    if np.isfinite(point):
        a = d * (mu - point) / sigma
        log_cdf = log_ndtr(a)
        lam = np.exp(norm.logpdf(a) - log_cdf)
    else:
        a = np.zeros_like(mu)
        log_cdf = np.zeros_like(mu)
        lam = np.zeros_like(mu)
    return sigma, r, d, a, log_cdf, lam


def truncnorm_loglik(theta: np.ndarray, X: np.ndarray, y: np.ndarray, point: float, direction: str) -> float:
    """Log-likelihood in (beta, log sigma)"""
    sigma, r, _, _, log_cdf, _ = _truncation_terms(X, y, theta, point, direction)
    return float(np.sum(norm.logpdf(r) - np.log(sigma) - log_cdf))


def truncnorm_gradient(theta: np.ndarray, X: np.ndarray, y: np.ndarray, point: float, direction: str) -> np.ndarray:
    sigma, r, d, a, _, lam = _truncation_terms(X, y, theta, point, direction)
    g_beta = X.T @ ((r - lam * d) / sigma)
    g_s = np.sum(r**2 - 1.0 + lam * a)
    return np.append(g_beta, g_s)


def truncnorm_hessian(theta: np.ndarray, X: np.ndarray, y: np.ndarray, point: float, direction: str) -> np.ndarray:
    sigma, r, d, a, _, lam = _truncation_terms(X, y, theta, point, direction)
    shrink = lam * (a + lam)
    h_bb = X.T @ (X * ((shrink - 1.0) / sigma**2)[:, None])
    h_bs = X.T @ (-2.0 * r / sigma - d / sigma * lam * (a * (a + lam) - 1.0))
    h_ss = np.sum(-2.0 * r**2 + lam * a * (a * (a + lam) - 1.0))
    p = X.shape[1]
    hessian = np.empty((p + 1, p + 1))
    hessian[:p, :p] = h_bb
    hessian[:p, p] = hessian[p, :p] = h_bs
    hessian[p, p] = h_ss
    return hessian


def fit_truncated_normal(design: DesignMatrix, point: float, direction: str) -> FittedModel:
    """Truncated-normal regression; Newton with line search over (beta, log sigma)"""
    if direction not in ("left", "right"):
        raise ModelFitError(f"truncation direction must be left or right, got {direction}")
    X = design.values
    y = np.asarray(design.response, dtype=float)
    if direction == "left" and np.any(y <= point):
        raise ModelFitError(f"left truncation at {point} but responses reach {y.min():g}")
    if direction == "right" and np.any(y >= point):
        raise ModelFitError(f"right truncation at {point} but responses reach {y.max():g}")
    n, p = X.shape
    if n <= p:
        raise DegreesOfFreedomError(f"{n} records for {p} coefficients")
    check_rank(design)

    start = np.linalg.lstsq(X, y, rcond=None)[0]
    spread = np.sqrt(np.mean((y - X @ start) ** 2))
    theta = np.append(start, np.log(max(spread, 1e-6)))
    current = truncnorm_loglik(theta, X, y, point, direction)
    converged = False
    iteration = 0
    for iteration in range(1, MAX_TRUNCNORM_ITERATIONS + 1):
        gradient = truncnorm_gradient(theta, X, y, point, direction)
        if np.max(np.abs(gradient)) < 1e-9:
            converged = True
            break
        step = np.linalg.lstsq(-truncnorm_hessian(theta, X, y, point, direction), gradient, rcond=None)[0]
        if gradient @ step <= 0:
            step = gradient / max(1.0, np.max(np.abs(gradient)))
        value = truncnorm_loglik(theta + step, X, y, point, direction)
        halvings = 0
        while (not np.isfinite(value) or value < current) and halvings < 40:
            step /= 2.0
            value = truncnorm_loglik(theta + step, X, y, point, direction)
            halvings += 1
        if not np.isfinite(value) or value < current:
            break
        theta = theta + step
        current = value
        if np.max(np.abs(step)) < 1e-12:
            converged = True
            break

    message = "" if converged else f"no convergence in {MAX_TRUNCNORM_ITERATIONS} iterations"
    if message:
        logger.warning(f"Truncated-normal fit: {message}")
    information = -truncnorm_hessian(theta, X, y, point, direction)
    beta, sigma = theta[:-1], float(np.exp(theta[-1]))
    diagnostics = ModelDiagnostics(
        converged=converged,
        iterations=iteration,
        log_likelihood=current,
        rmse=float(np.sqrt(np.mean((y - X @ beta) ** 2))),
        message=message,
    )
    return FittedModel(
        family="truncated-normal",
        link="identity",
        coefficients=beta,
        stderrs=_stderrs(information)[:p],
        column_names=list(design.column_names),
        n_obs=n,
        observed_range=_observed_range(y),
        diagnostics=diagnostics,
        residual_mse=sigma**2,
        truncation=(float(point), direction),
    )


def predict(model: FittedModel, design_row: np.ndarray) -> np.ndarray:
    """Inverse-link prediction; multinomial returns probabilities over `model.levels`"""
    X = np.asarray(design_row, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    width = model.coefficients.shape[-1]
    if X.shape[1] != width:
        raise ShapeError(f"row width {X.shape[1]} does not match {width} coefficients of {model.label or model.family}")
    if model.family == "multinomial":
        result = _multinomial_probabilities(X, model.coefficients)
    else:
        eta = X @ model.coefficients
        if model.link == "logit":
            result = expit(eta)
        elif model.link == "probit":
            result = ndtr(eta)
        elif model.link == "log":
            with np.errstate(over="ignore"):
                result = np.exp(eta)
        else:
            result = eta
    return result[0] if single else result


def predict_frame(model: FittedModel, rows: pd.DataFrame) -> np.ndarray:
    design = build_design(model.formula, rows, model.level_map, with_response=False)
    return predict(model, design.values)


def fit_formula(
    formula: ModelFormula,
    records: pd.DataFrame,
    level_map: Mapping[str, Tuple[str, ...]],
    family: str,
    link: Optional[str] = None,
    truncation: Optional[Tuple[float, str]] = None,
    label: str = "",
    response: Optional[np.ndarray] = None,
) -> FittedModel:
    """Build the design for `records` and fit the requested family; `response` overrides the formula's"""
    levels = collect_levels(formula, records, level_map)
    design = build_design(formula, records, levels, with_response=response is None)
    if response is not None:
        design.response = np.asarray(response)
    try:
        if family == "binomial":
            model = fit_binomial(design, link or "logit")
        elif family == "gaussian":
            model = fit_gaussian(design, link or "identity")
        elif family == "multinomial":
            model = fit_multinomial(design, levels[formula.response])
        elif family == "truncated-normal":
            model = fit_truncated_normal(design, *truncation)
        else:
            raise ModelFitError(f"unknown family {family}")
    except ModelFitError as e:
        raise type(e)(f"{label or formula.response}: {e}") from e
    model.formula = formula
    model.level_map = {name: values for name, values in levels.items() if name in formula.variables}
    model.label = label or formula.response
    logger.debug(f"Fitted {model.label} ({family}) on {model.n_obs} records")
    return model
