"""Item response kernel: 3PL curves, information, likelihoods, EAP and WLE.

Every function is pure; arrays of abilities are accepted wherever a scalar
ability is.
"""
import math
import numpy as np
from scipy.special import expit, log_expit, logsumexp
from benchcat.config import DEFAULT_INFO_FORM, INFO_FORMS, WLE_BRACKET, \
    WLE_MAX_ITERATIONS, WLE_TOLERANCE
from benchcat.errors import DegeneratePosteriorError
from benchcat.logger import logger
from benchcat.model import EAP, WLE, AbilityEstimate


# ============================ item-level curves ==============================
def icc_3pl(params, theta):
    """Return P(correct) = c + (1 - c) / (1 + exp(-a (theta - b)))."""
    return icc_arrays(params.a, params.b, params.c, theta)


def icc_arrays(a, b, c, theta):
    """Vectorized 3PL curve; broadcasting follows numpy rules."""
    prob = c + (1.0 - c) * expit(a * (np.asarray(theta) - b))
    return prob if np.ndim(prob) else float(prob)


def log_probabilities(a, b, c, theta):
    """Return (log p, log(1 - p)) computed without underflow.

    log p = logaddexp(log c, log(1 - c) + log_expit(z)) and
    log(1 - p) = log(1 - c) + log_expit(-z) with z = a (theta - b).
    """
    z = a * (np.asarray(theta) - b)
    c = np.asarray(c, dtype=float)
    with np.errstate(divide="ignore"):
        log_c = np.log(c)
        log_1mc = np.log1p(-c)
    log_p = np.logaddexp(log_c, log_1mc + log_expit(z))
    log_q = log_1mc + log_expit(-z)
    return log_p, log_q


def check_form(form):
    """Raise ValueError on unknown information forms."""
    if form not in INFO_FORMS:
        raise ValueError(
            f"Invalid information form: {form}. Expected one of {INFO_FORMS}."
        )


def fisher_info(params, theta, form=DEFAULT_INFO_FORM):
    """Return the item information at theta.

    form=paper: a^2 p (1 - p), the default selection criterion.
    form=exact3pl: a^2 ((1 - p) / p) ((p - c) / (1 - c))^2.
    """
    return info_arrays(params.a, params.b, params.c, theta, form)


def info_arrays(a, b, c, theta, form=DEFAULT_INFO_FORM):
    """Vectorized item information; zero wherever a == 0."""
    check_form(form)
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    prob = np.asarray(icc_arrays(a, b, c, theta), dtype=float)
    if form == "paper":
        info = a ** 2 * prob * (1.0 - prob)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            info = a ** 2 * ((1.0 - prob) / prob) * \
                ((prob - c) / (1.0 - c)) ** 2
        info = np.where(prob > 0, info, 0.0)
    info = np.where(a == 0, 0.0, info)
    return info if np.ndim(info) else float(info)


def info_derivative(params, theta, form=DEFAULT_INFO_FORM):
    """Return dI/dtheta of the chosen information form."""
    return info_derivative_arrays(params.a, params.b, params.c, theta, form)


def info_derivative_arrays(a, b, c, theta, form=DEFAULT_INFO_FORM):
    """Vectorized analytic derivative of the item information.

    With dp/dtheta = a (p - c)(1 - p) / (1 - c):
    paper:    dI = a^2 (1 - 2p) dp
    exact3pl: dI = a^2 / (1 - c)^2 * f'(p) dp, f(p) = (1 - p)(p - c)^2 / p
    """
    check_form(form)
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    prob = np.asarray(icc_arrays(a, b, c, theta), dtype=float)
    dprob = a * (prob - c) * (1.0 - prob) / (1.0 - c)
    if form == "paper":
        derivative = a ** 2 * (1.0 - 2.0 * prob) * dprob
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            shifted = prob - c
            f_prime = (
                (-shifted ** 2 + 2.0 * (1.0 - prob) * shifted) * prob
                - (1.0 - prob) * shifted ** 2
            ) / prob ** 2
            derivative = a ** 2 / (1.0 - c) ** 2 * f_prime * dprob
        derivative = np.where(prob > 0, derivative, 0.0)
    derivative = np.where(a == 0, 0.0, derivative)
    return derivative if np.ndim(derivative) else float(derivative)


# ============================ record-level scoring ===========================
def record_arrays(record, bank):
    """Return (a, b, c, y) arrays for the items of a record.

    Raises KeyError for items missing from the bank.
    """
    a, b, c = bank.arrays(record.item_ids)
    return a, b, c, record.responses.astype(float)


def log_likelihood(record, bank, theta):
    """Sum of y log p + (1 - y) log(1 - p) over the record at theta."""
    if len(record) == 0:
        return 0.0
    a, b, c, y = record_arrays(record, bank)
    return float(pattern_log_likelihood(a, b, c, y, theta))


def pattern_log_likelihood(a, b, c, y, theta):
    """Log-likelihood of a response pattern; theta may be an array."""
    theta = np.asarray(theta, dtype=float)
    log_p, log_q = log_probabilities(
        a, b, c, theta[..., np.newaxis]
    )
    terms = np.where(y == 1, log_p, log_q)
    return terms.sum(axis=-1)


def total_information(a, b, c, theta, form=DEFAULT_INFO_FORM):
    """Sum of item information at theta (scalar theta)."""
    return float(np.sum(info_arrays(a, b, c, theta, form)))


def se_from_info(record, bank, theta, form=DEFAULT_INFO_FORM):
    """Return 1 / sqrt(sum of information), or inf when it is zero."""
    a, b, c, _ = record_arrays(record, bank)
    return se_from_arrays(a, b, c, theta, form)


def se_from_arrays(a, b, c, theta, form=DEFAULT_INFO_FORM):
    """Information-based standard error for item arrays."""
    info = math.fsum(np.atleast_1d(info_arrays(a, b, c, theta, form)))
    if info <= 0:
        return math.inf
    return 1.0 / math.sqrt(info)


def eap_estimate(record, bank, grid):
    """Return the posterior-mean ability on the quadrature grid.

    The estimate's se is the posterior standard deviation (also exposed as
    posterior_sd); adaptive sessions replace se with the information-based
    standard error.
    """
    if len(record) == 0:
        return eap_from_log_likelihood(np.zeros(len(grid.nodes)), grid, 0)
    a, b, c, y = record_arrays(record, bank)
    return eap_from_arrays(a, b, c, y, grid)


def eap_from_arrays(a, b, c, y, grid):
    """EAP for item arrays and a response vector."""
    log_lik = pattern_log_likelihood(a, b, c, y, grid.nodes)
    return eap_from_log_likelihood(log_lik, grid, len(y))


def eap_from_log_likelihood(log_lik, grid, items_used):
    """Normalize prior x likelihood on the grid and take its moments."""
    with np.errstate(divide="ignore"):
        log_post = log_lik + np.log(grid.weights)
    if not np.any(np.isfinite(log_post)):
        raise DegeneratePosteriorError(
            f"Posterior is zero at all {len(grid.nodes)} quadrature nodes."
        )
    posterior = np.exp(log_post - logsumexp(log_post))
    theta = float(np.dot(posterior, grid.nodes))
    variance = float(np.dot(posterior, (grid.nodes - theta) ** 2))
    posterior_sd = math.sqrt(max(variance, 0.0))
    return AbilityEstimate(
        theta=theta, se=posterior_sd, estimator=EAP, items_used=items_used,
        posterior_sd=posterior_sd,
    )


def weighted_log_likelihood(record, bank, theta, form=DEFAULT_INFO_FORM):
    """Return log L(theta) + 0.5 log I(theta), the WLE objective."""
    a, b, c, y = record_arrays(record, bank)
    return weighted_objective(a, b, c, y, theta, form)


def weighted_objective(a, b, c, y, theta, form=DEFAULT_INFO_FORM):
    """Vectorized WLE objective; -inf where the information vanishes."""
    theta = np.asarray(theta, dtype=float)
    info = np.sum(
        info_arrays(a, b, c, theta[..., np.newaxis], form), axis=-1
    )
    with np.errstate(divide="ignore"):
        value = pattern_log_likelihood(a, b, c, y, theta) + 0.5 * np.log(info)
    return value if np.ndim(value) else float(value)


def wle_score(a, b, c, y, theta, form=DEFAULT_INFO_FORM):
    """Return score(theta) + J(theta) / (2 I(theta)).

    score = sum a (y - p)(p - c) / (p (1 - c)); J = sum dI_i/dtheta.
    """
    prob = icc_arrays(a, b, c, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        score_terms = a * (y - prob) * (prob - c) / (prob * (1.0 - c))
    score = math.fsum(np.where(prob > 0, score_terms, 0.0))
    info = math.fsum(np.atleast_1d(info_arrays(a, b, c, theta, form)))
    if info <= 0:
        return score
    correction = math.fsum(
        np.atleast_1d(info_derivative_arrays(a, b, c, theta, form))
    )
    return score + correction / (2.0 * info)


def wle_estimate(record, bank, form=DEFAULT_INFO_FORM):
    """Return Warm's weighted likelihood estimate of ability.

    Solves score + J / (2 I) = 0 by safeguarded Newton iteration on the
    bracket [-6, 6]. Without a sign change on the bracket the endpoint with
    the larger weighted likelihood is returned with saturated=True.
    """
    if len(record) == 0:
        raise ValueError("WLE needs at least one administered item.")
    a, b, c, y = record_arrays(record, bank)
    return wle_from_arrays(a, b, c, y, form)


# pylint: disable=too-many-locals
def wle_from_arrays(a, b, c, y, form=DEFAULT_INFO_FORM,
                    bracket=WLE_BRACKET):
    """WLE for item arrays and a response vector."""
    def objective(theta):
        return wle_score(a, b, c, y, theta, form)

    low, high = bracket
    f_low, f_high = objective(low), objective(high)
    saturated = False
    if f_low == 0:
        theta = low
    elif f_high == 0:
        theta = high
    elif f_low > 0 > f_high:
        theta = safeguarded_newton(objective, low, high, f_low)
    else:
        saturated = True
        if f_low > 0:
            theta = high
        elif f_high < 0:
            theta = low
        else:
            theta = low if weighted_objective(a, b, c, y, low, form) >= \
                weighted_objective(a, b, c, y, high, form) else high

    if saturated:
        logger.debug("WLE saturated at %s for %d items.", theta, len(y))
    return AbilityEstimate(
        theta=float(theta), se=se_from_arrays(a, b, c, theta, form),
        estimator=WLE, items_used=len(y), saturated=saturated,
    )


def safeguarded_newton(objective, low, high, f_low,
                       tolerance=WLE_TOLERANCE,
                       max_iterations=WLE_MAX_ITERATIONS):
    """Find a root of a decreasing-through-zero function on [low, high].

    Newton steps use a central-difference slope; a step leaving the current
    bracket, or a non-negative slope, falls back to bisection.
    """
    theta = 0.5 * (low + high)
    step = 1e-6
    for _ in range(max_iterations):
        value = objective(theta)
        if value == 0:
            return theta
        # Keep the sign change inside [low, high].
        if (value > 0) == (f_low > 0):
            low, f_low = theta, value
        else:
            high = theta
        slope = (objective(theta + step) - objective(theta - step)) / \
            (2 * step)
        candidate = theta - value / slope if slope < 0 else None
        if candidate is None or not low < candidate < high:
            candidate = 0.5 * (low + high)
        if abs(candidate - theta) < tolerance:
            return candidate
        theta = candidate
    logger.warning("WLE did not converge in %d iterations.", max_iterations)
    return theta
