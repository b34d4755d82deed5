"""Ontology-aware zero-inflated negative binomial model (per AE group).

Within one AE group, cell count n is Poisson(E * lambda) where lambda is 0
with probability p_i (excess zeros for drug i) and otherwise gamma with
shape r and scale mu_i / r. Marginally n is zero-inflated negative
binomial with mean E * mu_i and dispersion r; r is shared by all drugs in
the group. Group-level maximum likelihood is followed by empirical-Bayes
AE-level estimates: the posterior zero mass pi_hat for n = 0 cells and the
posterior mean lambda_hat everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, expit, gammaln, logit, xlogy

from .contingency import ContingencyTable
from .errors import DataError
from .reports import OntologyMap

#: p_i stays strictly below 1 so the zero-inflation log never degenerates.
P_MAX = 1.0 - 1e-8
#: Dispersion cap; a fit pinned here behaves like a zero-inflated Poisson.
R_CAP = 1e6
R_FLOOR = 1e-6
_XB = 35.0  # bound on the unconstrained coordinates


def zinb_logpmf(n, e, r, p, mu):
    """Log-pmf of the zero-inflated negative binomial with mean e * mu.

    n = 0 cells mix the excess-zero mass with the NB zero term; cells with
    e = 0 carry probability one at n = 0 regardless of the parameters.
    """
    n = np.asarray(n, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    m = e * mu
    log_ratio = np.log1p(m / r)  # log((r + m) / r)
    lognb = (
        gammaln(n + r)
        - gammaln(n + 1.0)
        - gammaln(r)
        - r * log_ratio
        + xlogy(n, m)
        - xlogy(n, r + m)
    )
    with np.errstate(divide="ignore"):
        zero_branch = np.logaddexp(np.log(p), np.log1p(-p) + lognb)
        pos_branch = np.log1p(-p) + lognb
    return np.where(n == 0, zero_branch, pos_branch)


@dataclass(frozen=True)
class ZinbGroupFit:
    """Group-level MLE for one AE group."""

    group_id: str
    drug_ids: tuple[str, ...]
    r_hat: float
    p_hat: np.ndarray
    mu_hat: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    r_at_cap: bool  # "Poisson-like dispersion": r pinned at the cap

    @property
    def s_hat(self) -> np.ndarray:
        """Group-level reporting rate per drug, (1 - p) * mu."""
        return (1.0 - self.p_hat) * self.mu_hat


def _initial_point(counts, expected, mask):
    obs = mask
    n_obs = np.where(obs, counts, 0.0)
    zero_frac = np.where(
        obs.sum(axis=1) > 0,
        ((n_obs == 0) & obs).sum(axis=1) / np.maximum(obs.sum(axis=1), 1),
        0.5,
    )
    p0 = np.clip(zero_frac, 0.05, 0.95)
    pos = obs & (counts > 0) & (expected > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(pos, counts / np.where(expected > 0, expected, 1.0), np.nan)
    mu0 = np.nanmean(np.where(pos, ratio, np.nan), axis=1)
    mu0 = np.where(np.isfinite(mu0) & (mu0 > 0), mu0, 1.0)
    return p0, mu0, 2.0


def _negloglik_and_grad(x, counts, expected, mask, n_drugs, fix_r):
    a = x[:n_drugs]
    b = x[n_drugs : 2 * n_drugs]
    p = P_MAX * expit(a)
    mu = np.exp(b)
    r = fix_r if fix_r is not None else float(np.exp(x[-1]))

    m = expected * mu[:, None]
    rm = r + m
    log_ratio = np.log1p(m / r)
    n = counts
    obs = mask > 0
    zero = (n == 0) & obs
    pos = (n > 0) & obs

    # A = NB(0 | r, m) = (r / (r + m))^r
    log_a0 = -r * log_ratio
    a0 = np.exp(log_a0)
    pc = p[:, None]
    lmix = pc + (1.0 - pc) * a0  # marginal probability of n = 0

    lognb = (
        gammaln(n + r)
        - gammaln(n + 1.0)
        - gammaln(r)
        - r * log_ratio
        + xlogy(n, m)
        - xlogy(n, rm)
    )
    ll = np.where(zero, np.log(lmix), 0.0) + np.where(pos, np.log1p(-pc) + lognb, 0.0)
    total = float(ll.sum())

    # d loglik / d p, m, r per cell
    dp = np.where(zero, (1.0 - a0) / lmix, 0.0) + np.where(pos, -1.0 / (1.0 - pc), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dm_pos = np.where(pos, n / np.where(m > 0, m, 1.0) - (n + r) / rm, 0.0)
    dm_zero = np.where(zero, -(1.0 - pc) * a0 * r / (rm * lmix), 0.0)
    dm = dm_pos + dm_zero

    grad = np.empty_like(x)
    grad_p = (dp * mask).sum(axis=1)
    grad[:n_drugs] = grad_p * p * (1.0 - p / P_MAX)
    grad[n_drugs : 2 * n_drugs] = (dm * expected * mask).sum(axis=1) * mu

    if fix_r is None:
        dr_pos = np.where(
            pos, digamma(n + r) - digamma(r) - log_ratio + (m - n) / rm, 0.0
        )
        dr_zero = np.where(zero, (1.0 - pc) * a0 * (-log_ratio + m / rm) / lmix, 0.0)
        grad[-1] = ((dr_pos + dr_zero) * mask).sum() * r

    return -total, -grad


def fit_zinb_group(
    counts,
    expected,
    *,
    group_id: str = "",
    drug_ids: Optional[Sequence[str]] = None,
    mask: Optional[np.ndarray] = None,
    init_strategy="moments",
    tol: float = 1e-10,
    max_iter: int = 500,
    fix_r: Optional[float] = None,
) -> ZinbGroupFit:
    """Maximize the group's ZINB likelihood over (p_1..I, mu_1..I, r).

    Optimization runs on logit(p), log(mu), log(r) with r capped at R_CAP
    (L-BFGS-B with the analytic gradient). `mask` marks cells that carry
    likelihood; unobserved cells (e.g. held out by random splitting) are
    excluded. `fix_r` freezes the dispersion, giving a zero-inflated
    Poisson fit when set to the cap. Non-convergence is flagged on the
    result, not raised.
    """
    counts = np.asarray(counts, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if counts.shape != expected.shape or counts.ndim != 2:
        raise DataError("counts/expected shape mismatch")
    n_drugs = counts.shape[0]
    if drug_ids is None:
        drug_ids = tuple(f"drug{i}" for i in range(n_drugs))
    if mask is None:
        mask = np.ones_like(counts, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    maskf = mask.astype(np.float64)

    if ((counts > 0) & (expected <= 0) & mask).any():
        raise DataError(f"group {group_id!r}: positive count with zero expected count")
    if not ((counts > 0) & mask).any():
        raise DataError("degenerate group: no events")

    if init_strategy == "moments":
        p0, mu0, r0 = _initial_point(counts, expected, mask)
    else:
        p0, mu0, r0 = init_strategy
        p0 = np.asarray(p0, dtype=np.float64)
        mu0 = np.asarray(mu0, dtype=np.float64)

    x0 = np.concatenate(
        [
            logit(np.clip(p0 / P_MAX, 1e-12, 1.0 - 1e-12)),
            np.log(mu0),
            [] if fix_r is not None else [np.log(r0)],
        ]
    )
    bounds = [(-_XB, _XB)] * (2 * n_drugs)
    if fix_r is None:
        bounds.append((np.log(R_FLOOR), np.log(R_CAP)))

    res = minimize(
        _negloglik_and_grad,
        x0,
        args=(counts, expected, maskf, n_drugs, fix_r),
        method="L-BFGS-B",
        jac=True,
        bounds=bounds,
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-9},
    )
    p_hat = P_MAX * expit(res.x[:n_drugs])
    mu_hat = np.exp(res.x[n_drugs : 2 * n_drugs])
    r_hat = fix_r if fix_r is not None else float(np.exp(res.x[-1]))
    p_hat.setflags(write=False)
    mu_hat.setflags(write=False)
    return ZinbGroupFit(
        group_id=group_id,
        drug_ids=tuple(drug_ids),
        r_hat=float(r_hat),
        p_hat=p_hat,
        mu_hat=mu_hat,
        loglik=float(-res.fun),
        converged=bool(res.success),
        n_iter=int(res.nit),
        r_at_cap=bool(r_hat >= R_CAP * (1.0 - 1e-9)),
    )


def posterior_zero_mass(e, p_hat, mu_hat, r_hat):
    """Posterior probability that lambda = 0, for an n = 0 cell.

    Equals p / (p + (1 - p) * (r / (r + E mu))^r); the gamma branch's zero
    probability comes from its moment generating function at -E.
    """
    e = np.asarray(e, dtype=np.float64)
    p = np.asarray(p_hat, dtype=np.float64)
    mu = np.asarray(mu_hat, dtype=np.float64)
    nb_zero = np.exp(-r_hat * np.log1p(e * mu / r_hat))
    return p / (p + (1.0 - p) * nb_zero)


@dataclass(frozen=True)
class AeLevelEstimate:
    """Empirical-Bayes AE-level reporting rate for one cell."""

    lambda_hat: float
    pi_hat: float


def eb_lambda(n, e, p_hat, mu_hat, r_hat) -> AeLevelEstimate:
    """Posterior mean of lambda for one cell (pi_hat is 0 when n > 0)."""
    lam, pi = eb_lambda_arrays(n, e, p_hat, mu_hat, r_hat)
    return AeLevelEstimate(lambda_hat=float(lam), pi_hat=float(pi))


def eb_lambda_arrays(n, e, p_hat, mu_hat, r_hat):
    """Vectorized posterior means: (lambda_hat, pi_hat)."""
    n = np.asarray(n, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    p = np.asarray(p_hat, dtype=np.float64)
    mu = np.asarray(mu_hat, dtype=np.float64)
    denom = r_hat + e * mu
    pi0 = posterior_zero_mass(e, p, mu, r_hat)
    lam_zero = (1.0 - pi0) * r_hat * mu / denom
    lam_pos = mu * (r_hat + n) / denom
    lam = np.where(n == 0, lam_zero, lam_pos)
    pi = np.where(n == 0, pi0, 0.0)
    return lam, pi


def group_estimates(counts, expected, fit: ZinbGroupFit, mask=None):
    """AE-level (lambda_hat, pi_hat) matrices for one group's cells.

    Cells excluded by `mask` carry no observation, so their posterior is
    the prior: lambda_hat = s_hat and pi_hat = p_hat.
    """
    counts = np.asarray(counts, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    p = fit.p_hat[:, None]
    mu = fit.mu_hat[:, None]
    lam, pi = eb_lambda_arrays(counts, expected, p, mu, fit.r_hat)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        prior_mean = np.broadcast_to((1.0 - p) * mu, counts.shape)
        prior_zero = np.broadcast_to(p, counts.shape)
        lam = np.where(mask, lam, prior_mean)
        pi = np.where(mask, pi, prior_zero)
    return lam, pi


@dataclass
class GroupedFits:
    """All per-group fits plus assembled AE-level estimate matrices."""

    group_ids: tuple[str, ...]
    fits: dict[str, ZinbGroupFit]
    failures: dict[str, str] = field(default_factory=dict)
    lambda_hat: np.ndarray = None
    pi_hat: np.ndarray = None
    s_hat: np.ndarray = None  # drugs x groups; NaN columns for failed groups

    @property
    def all_converged(self) -> bool:
        return not self.failures and all(f.converged for f in self.fits.values())


def fit_all_groups(
    table: ContingencyTable,
    expected,
    ontology: OntologyMap,
    *,
    mask: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: int = 500,
    fix_r: Optional[float] = None,
) -> GroupedFits:
    """Fit every AE group independently and assemble AE-level estimates.

    A failing group is recorded under its group id and its estimate
    columns are NaN; the other groups are unaffected.
    """
    expected = np.asarray(expected, dtype=np.float64)
    ontology.require_cover(table.ae_ids)
    group_ids = tuple(sorted({ontology.group_of(a) for a in table.ae_ids}))
    n_drugs, n_aes = table.shape

    lambda_hat = np.full((n_drugs, n_aes), np.nan)
    pi_hat = np.full((n_drugs, n_aes), np.nan)
    s_hat = np.full((n_drugs, len(group_ids)), np.nan)
    fits: dict[str, ZinbGroupFit] = {}
    failures: dict[str, str] = {}

    for k, gid in enumerate(group_ids):
        cols = [j for j, a in enumerate(table.ae_ids) if ontology.group_of(a) == gid]
        sub_counts = table.counts[:, cols]
        sub_expected = expected[:, cols]
        sub_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, cols]
        try:
            fit = fit_zinb_group(
                sub_counts,
                sub_expected,
                group_id=gid,
                drug_ids=table.drug_ids,
                mask=sub_mask,
                tol=tol,
                max_iter=max_iter,
                fix_r=fix_r,
            )
        except (DataError, FloatingPointError) as exc:
            failures[gid] = str(exc)
            continue
        fits[gid] = fit
        lam, pi = group_estimates(sub_counts, sub_expected, fit, mask=sub_mask)
        lambda_hat[:, cols] = lam
        pi_hat[:, cols] = pi
        s_hat[:, k] = fit.s_hat

    return GroupedFits(
        group_ids=group_ids,
        fits=fits,
        failures=failures,
        lambda_hat=lambda_hat,
        pi_hat=pi_hat,
        s_hat=s_hat,
    )
