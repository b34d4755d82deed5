"""Train/validation splits of a count table: thinning, stratified, random.

Thinning draws N1 ~ Binomial(n, epsilon) per cell (the conditional law of
one Poisson part given the sum, by convolution closure) and keeps
N2 = n - N1, so the two parts are marginally independent Poissons with
expected counts epsilon*E and (1-epsilon)*E. Stratified splitting expands
each cell into unit instances and allocates round(epsilon*n) of them to
the training side. Random splitting assigns whole cells to one side; the
other side records them as missing, not zero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import binom

from .contingency import ContingencyTable
from .errors import DataError
from .seeding import counter_rng

SPLIT_METHODS = ("thinning", "stratified", "random")


@dataclass(frozen=True)
class SplitPair:
    """Paired train/validation tables with scaled expected counts.

    For thinning and stratified splits the two sides sum to the source
    cell-wise and the masks are None (every cell observed). For random
    splits each cell lives wholly on one side; the masks mark which.
    """

    train: ContingencyTable
    valid: ContingencyTable
    epsilon: float
    method: str
    seed: int
    train_expected: np.ndarray
    valid_expected: np.ndarray
    train_mask: Optional[np.ndarray] = None
    valid_mask: Optional[np.ndarray] = None


def _check_epsilon(epsilon: float) -> None:
    if not (0.0 < epsilon < 1.0):
        raise DataError("epsilon must lie strictly between 0 and 1")


def _cell_uniforms(seed: int, shape: tuple[int, int]) -> np.ndarray:
    # one variate per cell in row-major order; (seed, cell index) fixes it
    return counter_rng(seed).random(shape[0] * shape[1]).reshape(shape)


def thin_counts(
    table: ContingencyTable, expected, epsilon: float, rng_seed: int
) -> SplitPair:
    """Binomial thinning: N1 ~ Binomial(n, epsilon), N2 = n - N1 per cell."""
    _check_epsilon(epsilon)
    expected = np.asarray(expected, dtype=np.float64)
    u = _cell_uniforms(rng_seed, table.shape)
    n1 = binom.ppf(u, table.counts, epsilon).astype(np.int64)
    n2 = table.counts - n1
    return SplitPair(
        train=ContingencyTable.from_counts(table.drug_ids, table.ae_ids, n1),
        valid=ContingencyTable.from_counts(table.drug_ids, table.ae_ids, n2),
        epsilon=epsilon,
        method="thinning",
        seed=rng_seed,
        train_expected=epsilon * expected,
        valid_expected=(1.0 - epsilon) * expected,
    )


def stratified_split(
    table: ContingencyTable, expected, epsilon: float, rng_seed: int
) -> SplitPair:
    """Unit-expansion split: train takes round(epsilon * n) units per cell.

    Fractional parts are resolved by randomized rounding, so the expected
    training share is exactly epsilon while integer targets are exact.
    """
    _check_epsilon(epsilon)
    expected = np.asarray(expected, dtype=np.float64)
    target = epsilon * table.counts
    nearest = np.rint(target)
    # float-product noise must not break exact integer targets (0.7 * 10)
    integral = np.abs(target - nearest) < 1e-9
    base = np.where(integral, nearest, np.floor(target)).astype(np.int64)
    frac = np.where(integral, 0.0, target - np.floor(target))
    u = _cell_uniforms(rng_seed, table.shape)
    n1 = base + (u < frac).astype(np.int64)
    n2 = table.counts - n1
    return SplitPair(
        train=ContingencyTable.from_counts(table.drug_ids, table.ae_ids, n1),
        valid=ContingencyTable.from_counts(table.drug_ids, table.ae_ids, n2),
        epsilon=epsilon,
        method="stratified",
        seed=rng_seed,
        train_expected=epsilon * expected,
        valid_expected=(1.0 - epsilon) * expected,
    )


def random_split(
    table: ContingencyTable, expected, epsilon: float, rng_seed: int
) -> SplitPair:
    """Pair-level split: each cell goes wholly to one side.

    The receiving side keeps the full count and the full expected count;
    the other side records the cell as missing.
    """
    _check_epsilon(epsilon)
    expected = np.asarray(expected, dtype=np.float64)
    u = _cell_uniforms(rng_seed, table.shape)
    to_train = u < epsilon
    n1 = np.where(to_train, table.counts, 0).astype(np.int64)
    n2 = np.where(~to_train, table.counts, 0).astype(np.int64)
    return SplitPair(
        train=ContingencyTable.from_counts(table.drug_ids, table.ae_ids, n1),
        valid=ContingencyTable.from_counts(table.drug_ids, table.ae_ids, n2),
        epsilon=epsilon,
        method="random",
        seed=rng_seed,
        train_expected=expected,
        valid_expected=expected,
        train_mask=to_train,
        valid_mask=~to_train,
    )


def split_table(
    table: ContingencyTable, expected, method: str, epsilon: float, rng_seed: int
) -> SplitPair:
    """Dispatch on the method name."""
    if method == "thinning":
        return thin_counts(table, expected, epsilon, rng_seed)
    if method == "stratified":
        return stratified_split(table, expected, epsilon, rng_seed)
    if method == "random":
        return random_split(table, expected, epsilon, rng_seed)
    raise DataError(f"unknown split method {method!r}")


@dataclass(frozen=True)
class SideCoverage:
    n_drugs_present: int
    n_aes_present: int
    n_pairs_positive: int
    n_pairs_missing: int


@dataclass(frozen=True)
class CoverageSummary:
    train: SideCoverage
    valid: SideCoverage


def _side_coverage(table: ContingencyTable, mask: Optional[np.ndarray]) -> SideCoverage:
    observed = np.ones(table.shape, dtype=bool) if mask is None else mask
    return SideCoverage(
        n_drugs_present=int(observed.any(axis=1).sum()),
        n_aes_present=int(observed.any(axis=0).sum()),
        n_pairs_positive=int((observed & (table.counts > 0)).sum()),
        n_pairs_missing=int((~observed).sum()),
    )


def coverage_report(pair: SplitPair) -> CoverageSummary:
    """Presence/missingness bookkeeping for both sides of a split."""
    return CoverageSummary(
        train=_side_coverage(pair.train, pair.train_mask),
        valid=_side_coverage(pair.valid, pair.valid_mask),
    )


SPLIT_CSV_HEADER = ["drug_id", "ae_id", "n", "E"]


def _write_side_csv(path: Path, table: ContingencyTable, expected, mask) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SPLIT_CSV_HEADER)
        for i, d in enumerate(table.drug_ids):
            for j, a in enumerate(table.ae_ids):
                if mask is not None and not mask[i, j]:
                    continue  # missing, not zero
                writer.writerow([d, a, int(table.counts[i, j]), repr(float(expected[i, j]))])


def write_split(pair: SplitPair, outdir: str | Path) -> None:
    """Write train.csv, valid.csv and a JSON manifest into `outdir`."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_side_csv(outdir / "train.csv", pair.train, pair.train_expected, pair.train_mask)
    _write_side_csv(outdir / "valid.csv", pair.valid, pair.valid_expected, pair.valid_mask)
    cov = coverage_report(pair)
    manifest = {
        "schema_version": 1,
        "method": pair.method,
        "epsilon": pair.epsilon,
        "seed": pair.seed,
        "coverage": {
            "train": cov.train.__dict__,
            "valid": cov.valid.__dict__,
        },
    }
    (outdir / "split.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
