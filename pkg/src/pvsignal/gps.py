"""Gamma-Poisson shrinker: marginal-likelihood fit and posterior summaries.

The cell count n is Poisson(E * lambda) with lambda drawn from a
two-component gamma mixture prior (shape/rate parameterization). The
marginal of n is then a mixture of two negative binomials with success
parameter q = E / (E + beta), which is what the fit maximizes. Posterior
summaries per cell: the component weight omega_star, the posterior mean,
EBlog2 (posterior mean of log2 lambda via the digamma function), EBGM,
and credibility quantiles by bisection on the mixture CDF.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, expit, gammainc, gammaln, logit, xlogy

from .errors import NumericalError

LOG2 = np.log(2.0)

#: Conventional starting point for the hyperparameter search.
DEFAULT_INIT = None  # set below, after GpsHyper is defined

QUANTILE_CDF_TOL = 1e-8
MAX_BRACKET_DOUBLINGS = 60


@dataclass(frozen=True)
class GpsHyper:
    """Mixture-prior hyperparameters (two gamma components plus a weight)."""

    alpha1: float
    beta1: float
    alpha2: float
    beta2: float
    omega: float

    def __post_init__(self):
        if min(self.alpha1, self.beta1, self.alpha2, self.beta2) <= 0:
            raise ValueError("gamma shape/rate parameters must be positive")
        if not (0.0 < self.omega <= 1.0):
            raise ValueError("omega must lie in (0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha1, self.beta1, self.alpha2, self.beta2, self.omega])

    def ordered(self) -> "GpsHyper":
        """Components sorted by ascending prior mean (resolves label switching)."""
        if self.alpha1 / self.beta1 <= self.alpha2 / self.beta2:
            return self
        return GpsHyper(self.alpha2, self.beta2, self.alpha1, self.beta1, 1.0 - self.omega)


DEFAULT_INIT = GpsHyper(0.2, 0.1, 2.0, 4.0, 1.0 / 3.0)


def nb_logpmf(n, shape, q):
    """Log-pmf of the negative binomial with given shape and success parameter q.

    With q = E / (E + beta) this is the Poisson-gamma marginal for a
    gamma(shape, rate=beta) mixing distribution.
    """
    n = np.asarray(n, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return (
            gammaln(n + shape)
            - gammaln(n + 1.0)
            - gammaln(shape)
            + xlogy(n, q)
            + shape * np.log1p(-q)
        )


def _mixture_cell_logliks(counts, expected, theta: GpsHyper):
    """Per-cell log marginal under the two-component NB mixture."""
    n = np.asarray(counts, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    q1 = e / (e + theta.beta1)
    q2 = e / (e + theta.beta2)
    with np.errstate(divide="ignore"):
        l1 = np.log(theta.omega) + nb_logpmf(n, theta.alpha1, q1)
        l2 = np.log1p(-theta.omega) + nb_logpmf(n, theta.alpha2, q2)
    return np.logaddexp(l1, l2), l1, l2


def gps_marginal_loglik(counts, expected, theta: GpsHyper) -> float:
    """Total log marginal likelihood over all cells."""
    cell, _, _ = _mixture_cell_logliks(counts, expected, theta)
    if not np.isfinite(cell).all():
        idx = tuple(int(v) for v in np.argwhere(~np.isfinite(cell))[0])
        raise NumericalError(f"likelihood overflow at cell {idx}")
    return float(cell.sum())


def _pack(theta: GpsHyper) -> np.ndarray:
    return np.array(
        [
            np.log(theta.alpha1),
            np.log(theta.beta1),
            np.log(theta.alpha2),
            np.log(theta.beta2),
            logit(theta.omega),
        ]
    )


def _unpack(x: np.ndarray) -> GpsHyper:
    a1, b1, a2, b2 = np.exp(x[:4])
    return GpsHyper(float(a1), float(b1), float(a2), float(b2), float(expit(x[4])))


@dataclass(frozen=True)
class GpsFit:
    """Fitted hyperparameters with optimizer diagnostics."""

    theta: GpsHyper
    loglik: float
    converged: bool
    n_iter: int
    n_fev: int
    trace: tuple[float, ...]  # best log-likelihood after each accepted iteration


def fit_gps(
    counts,
    expected,
    init: GpsHyper | None = None,
    tol: float = 1e-8,
    max_iter: int = 2000,
) -> GpsFit:
    """Maximize the NB-mixture marginal likelihood (Nelder-Mead).

    The search runs on an unconstrained transform (log for shapes/rates,
    logit for the weight), so every visited point is a valid parameter.
    Hitting max_iter flags the result non-converged instead of raising.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    theta0 = DEFAULT_INIT if init is None else init
    n = np.asarray(counts, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)

    def negloglik(x):
        if not np.isfinite(x).all() or np.abs(x).max() > 50:
            return np.inf
        cell, _, _ = _mixture_cell_logliks(n, e, _unpack(x))
        total = cell.sum()
        if np.isnan(total):
            return np.inf
        return -total

    x0 = _pack(theta0)
    f0 = negloglik(x0)
    if not np.isfinite(f0):
        raise NumericalError("objective is not finite at the initial point")

    trace: list[float] = []

    def record(xk):
        trace.append(-negloglik(xk))

    res = minimize(
        negloglik,
        x0,
        method="Nelder-Mead",
        callback=record,
        options={"maxiter": max_iter, "fatol": tol, "xatol": 1e-6, "disp": False},
    )
    theta_hat = _unpack(res.x).ordered()
    return GpsFit(
        theta=theta_hat,
        loglik=float(-res.fun),
        converged=bool(res.success),
        n_iter=int(res.nit),
        n_fev=int(res.nfev),
        trace=tuple(trace),
    )


def posterior_weights(counts, expected, theta: GpsHyper) -> np.ndarray:
    """Posterior probability that lambda came from the first component."""
    cell, l1, _ = _mixture_cell_logliks(counts, expected, theta)
    return np.exp(l1 - cell)


@dataclass(frozen=True)
class GpsCellPosterior:
    """Posterior mixture for one cell: gamma components plus summaries."""

    omega_star: float
    shape1: float
    rate1: float
    shape2: float
    rate2: float
    mean: float
    eb_log2: float
    ebgm: float


def posterior_summaries(counts, expected, theta: GpsHyper):
    """Vectorized posterior summaries: (omega_star, mean, eb_log2, ebgm)."""
    n = np.asarray(counts, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    w = posterior_weights(n, e, theta)
    m1 = (theta.alpha1 + n) / (theta.beta1 + e)
    m2 = (theta.alpha2 + n) / (theta.beta2 + e)
    mean = w * m1 + (1.0 - w) * m2
    eblog = (
        w * (digamma(theta.alpha1 + n) - np.log(theta.beta1 + e))
        + (1.0 - w) * (digamma(theta.alpha2 + n) - np.log(theta.beta2 + e))
    ) / LOG2
    return w, mean, eblog, np.exp2(eblog)


def gps_posterior(n: int, e: float, theta: GpsHyper) -> GpsCellPosterior:
    """Posterior summary for one (n, E) cell."""
    w, mean, eblog, ebgm = posterior_summaries(n, e, theta)
    return GpsCellPosterior(
        omega_star=float(w),
        shape1=theta.alpha1 + n,
        rate1=theta.beta1 + e,
        shape2=theta.alpha2 + n,
        rate2=theta.beta2 + e,
        mean=float(mean),
        eb_log2=float(eblog),
        ebgm=float(ebgm),
    )


def posterior_cdf(lam: float, n: int, e: float, theta: GpsHyper) -> float:
    """Mixture-posterior CDF of lambda at `lam`."""
    if lam <= 0:
        return 0.0
    w = float(posterior_weights(n, e, theta))
    c1 = gammainc(theta.alpha1 + n, (theta.beta1 + e) * lam)
    c2 = gammainc(theta.alpha2 + n, (theta.beta2 + e) * lam)
    return float(w * c1 + (1.0 - w) * c2)


def posterior_quantile(n: int, e: float, theta: GpsHyper, prob: float) -> float:
    """Posterior quantile by bisection, accurate to 1e-8 on the CDF scale."""
    if not (0.0 < prob < 1.0):
        raise ValueError("prob must lie strictly between 0 and 1")
    post = gps_posterior(n, e, theta)
    hi = max(1.0, 2.0 * post.mean)
    doublings = 0
    while posterior_cdf(hi, n, e, theta) < prob:
        hi *= 2.0
        doublings += 1
        if doublings > MAX_BRACKET_DOUBLINGS:
            raise NumericalError("quantile bracket failure")
    lo = 0.0
    mid = 0.5 * hi
    for _ in range(500):
        mid = 0.5 * (lo + hi)
        c = posterior_cdf(mid, n, e, theta)
        # interval criterion keeps the quantile itself sharp even where
        # the posterior density is nearly flat
        if abs(c - prob) <= QUANTILE_CDF_TOL and hi - lo <= 1e-9 * (1.0 + mid):
            return mid
        if c < prob:
            lo = mid
        else:
            hi = mid
    return mid


@dataclass(frozen=True)
class GpsCellRow:
    """One row of the per-cell GPS report."""

    drug_id: str
    ae_id: str
    n: int
    e: float
    ebgm: float
    q_low: float
    q_high: float
    is_signal: bool


def gps_cell_report(
    table,
    expected,
    theta: GpsHyper,
    rr_threshold: float = 2.0,
    lower_prob: float = 0.01,
    upper_prob: float = 0.99,
) -> list[GpsCellRow]:
    """Per-cell EBGM, credibility bounds, and the signal call.

    A cell is flagged when the lower credibility bound exceeds the
    reporting-rate threshold.
    """
    if rr_threshold <= 0 or not (0 < lower_prob < 1):
        raise ValueError("thresholds out of range")
    expected = np.asarray(expected, dtype=np.float64)
    rows = []
    for i, d in enumerate(table.drug_ids):
        for j, a in enumerate(table.ae_ids):
            n = int(table.counts[i, j])
            e = float(expected[i, j])
            post = gps_posterior(n, e, theta)
            q_low = posterior_quantile(n, e, theta, lower_prob)
            q_high = posterior_quantile(n, e, theta, upper_prob)
            rows.append(
                GpsCellRow(
                    drug_id=d,
                    ae_id=a,
                    n=n,
                    e=e,
                    ebgm=post.ebgm,
                    q_low=q_low,
                    q_high=q_high,
                    is_signal=bool(q_low > rr_threshold),
                )
            )
    return rows


def gps_signals(
    table,
    expected,
    theta: GpsHyper,
    rr_threshold: float = 2.0,
    lower_prob: float = 0.01,
) -> list[tuple[str, str, float, float, bool]]:
    """(drug, AE, ebgm, lower bound, is_signal) per cell."""
    return [
        (r.drug_id, r.ae_id, r.ebgm, r.q_low, r.is_signal)
        for r in gps_cell_report(table, expected, theta, rr_threshold, lower_prob)
    ]
