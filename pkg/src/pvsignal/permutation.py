"""Permutation null for the maximum group-level reporting rate (maxS).

AE sets are shuffled across reports while every report keeps its drug set,
which preserves the correlation of AEs reported together. Each permuted
report set is pushed through the same weighting pipeline as the observed
analysis (with the observed AE/group roster held fixed) and refitted; the
largest fitted group-level rate from each replicate forms the null. The
observed statistic joins the pool, so there are N + 1 values and every
q-value is at least 1 / (N + 1).
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .contingency import build_table, expected_counts, apply_filters, reindex
from .errors import DataError, NumericalError
from .reports import IcsrReport, OntologyMap, ReportSet
from .seeding import derive_seed
from .zgps import GroupedFits, ZinbGroupFit, fit_all_groups


def permute_reports(reports: ReportSet, rng_seed: int) -> ReportSet:
    """Randomly reassign whole AE sets across reports; drug sets stay put."""
    if len(reports) < 2:
        raise DataError("nothing to permute")
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(len(reports))
    return ReportSet(
        IcsrReport(rep.report_id, rep.drugs, reports[int(k)].events)
        for rep, k in zip(reports, perm)
    )


def max_statistic(fits: Sequence[ZinbGroupFit] | GroupedFits) -> float:
    """Largest fitted group-level reporting rate across drugs and groups."""
    if isinstance(fits, GroupedFits):
        fits = list(fits.fits.values())
    if not fits:
        raise DataError("no fits")
    return float(max(fit.s_hat.max() for fit in fits))


@dataclass(frozen=True)
class PermutationResult:
    """maxS null distribution with familywise-adjusted q-values."""

    observed_max_s: float
    null_max_s: tuple[float, ...]
    q_values: np.ndarray
    n_permutations: int
    n_failed: int
    drug_ids: tuple[str, ...]
    group_ids: tuple[str, ...]
    s_hat: np.ndarray  # statistic matrix that q_values refers to
    level: str  # "group" (default) or "ae"
    observed_fits: GroupedFits


def q_values(s_hat, null_max_s: Sequence[float], observed_max_s: float) -> np.ndarray:
    """q(i,k) = #{v in pool : v >= s_ik} / |pool|, pool = null + observed."""
    pool = np.sort(np.asarray(list(null_max_s) + [observed_max_s], dtype=np.float64))
    s = np.asarray(s_hat, dtype=np.float64)
    ge = pool.size - np.searchsorted(pool, s, side="left")
    return ge / pool.size


def _replicate_stat(args):
    (b, base_seed, reports, ontology, drug_ids, ae_ids, tol, max_iter, level) = args
    try:
        permuted = permute_reports(reports, derive_seed(base_seed, b))
        table = build_table(permuted, drug_whitelist=drug_ids, ae_whitelist=ae_ids)
        table = reindex(table, drug_ids, ae_ids)
        expected = expected_counts(table)
        fits = fit_all_groups(table, expected, ontology, tol=tol, max_iter=max_iter)
        if fits.failures:
            msgs = "; ".join(f"{g}: {m}" for g, m in sorted(fits.failures.items()))
            return b, None, msgs
        stat = (
            float(np.nanmax(fits.lambda_hat)) if level == "ae" else max_statistic(fits)
        )
        return b, stat, None
    except (DataError, NumericalError) as exc:
        return b, None, str(exc)


def null_distribution(
    reports: ReportSet,
    ontology: OntologyMap,
    n_permutations: int,
    base_seed: int,
    *,
    min_ae_count: int = 0,
    min_group_size: int = 0,
    tol: float = 1e-10,
    max_iter: int = 500,
    level: str = "group",
    workers: int = 1,
    max_failure_frac: float = 0.01,
) -> PermutationResult:
    """Observed analysis plus N permutation replicates of the full pipeline.

    Replicate b always draws from seed derive_seed(base_seed, b), so the
    result is byte-identical for any worker count. Threshold filters run
    only on the observed data; replicates are rebuilt on the observed
    drug/AE roster so the statistic keeps a constant index set.
    """
    if n_permutations < 1:
        raise DataError("need at least one permutation")
    if level not in ("group", "ae"):
        raise DataError(f"unknown permutation level {level!r}")

    table = build_table(reports)
    table, ontology = apply_filters(table, ontology, min_ae_count, min_group_size)
    expected = expected_counts(table)
    observed_fits = fit_all_groups(table, expected, ontology, tol=tol, max_iter=max_iter)
    if observed_fits.failures:
        msgs = "; ".join(f"{g}: {m}" for g, m in sorted(observed_fits.failures.items()))
        raise NumericalError(f"observed fit failed: {msgs}")
    if level == "ae":
        observed_stat = float(np.nanmax(observed_fits.lambda_hat))
        stat_matrix = observed_fits.lambda_hat
        col_ids = table.ae_ids
    else:
        observed_stat = max_statistic(observed_fits)
        stat_matrix = observed_fits.s_hat
        col_ids = observed_fits.group_ids

    tasks = [
        (b, base_seed, reports, ontology, table.drug_ids, table.ae_ids, tol, max_iter, level)
        for b in range(1, n_permutations + 1)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_replicate_stat, tasks, chunksize=8))
    else:
        outcomes = [_replicate_stat(t) for t in tasks]
    outcomes.sort(key=lambda o: o[0])  # fixed reduction order

    null: list[float] = []
    failures: list[tuple[int, str]] = []
    for b, stat, err in outcomes:
        if stat is None:
            failures.append((b, err))
        else:
            null.append(stat)
    if failures:
        frac = len(failures) / n_permutations
        if frac >= max_failure_frac:
            raise NumericalError(
                f"{len(failures)}/{n_permutations} permutation replicates failed; "
                f"first: replicate {failures[0][0]}: {failures[0][1]}"
            )
        warnings.warn(
            f"excluded {len(failures)} failed permutation replicate(s)",
            RuntimeWarning,
            stacklevel=2,
        )

    q = q_values(stat_matrix, null, observed_stat)
    return PermutationResult(
        observed_max_s=observed_stat,
        null_max_s=tuple(null),
        q_values=q,
        n_permutations=len(null),
        n_failed=len(failures),
        drug_ids=table.drug_ids,
        group_ids=tuple(col_ids),
        s_hat=stat_matrix,
        level=level,
        observed_fits=observed_fits,
    )


@dataclass(frozen=True)
class AeSignal:
    drug_id: str
    ae_id: str
    group_id: str
    lambda_hat: float
    q: float
    is_signal: bool


@dataclass(frozen=True)
class GroupSignal:
    drug_id: str
    group_id: str
    s_hat: float
    q: float
    is_signal: bool


def zgps_signals(
    table,
    ontology: OntologyMap,
    fits: GroupedFits,
    result: PermutationResult,
    rr_threshold: float = 2.0,
    alpha: float = 0.05,
) -> tuple[list[AeSignal], list[GroupSignal]]:
    """Signal calls: rate above threshold AND q-value below alpha.

    AE-level signals use lambda_hat with the q-value of the AE's group;
    group-level concerns use s_hat with its own q-value.
    """
    if not (0.0 <= alpha <= 1.0) or rr_threshold < 0:
        raise DataError("thresholds out of range")
    if result.level != "group":
        raise DataError("signal calls need a group-level permutation result")
    group_pos = {g: k for k, g in enumerate(result.group_ids)}

    ae_signals = []
    for i, d in enumerate(table.drug_ids):
        for j, a in enumerate(table.ae_ids):
            g = ontology.group_of(a)
            lam = float(fits.lambda_hat[i, j])
            qv = float(result.q_values[i, group_pos[g]])
            ae_signals.append(
                AeSignal(d, a, g, lam, qv, bool(lam > rr_threshold and qv < alpha))
            )
    group_signals = []
    for i, d in enumerate(table.drug_ids):
        for k, g in enumerate(result.group_ids):
            s = float(fits.s_hat[i, k])
            qv = float(result.q_values[i, k])
            group_signals.append(
                GroupSignal(d, g, s, qv, bool(s > rr_threshold and qv < alpha))
            )
    return ae_signals, group_signals
