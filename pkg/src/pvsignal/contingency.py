"""Contingency tables: multi-drug weighting, count filters, expected counts.

A report contributes weight 1/|drugs| to every (drug, AE) cell it mentions,
so single-drug reports count 1 per AE and a report's AE set always carries
total weight |events|. Accumulated weights are kept as exact rationals and
rounded half away from zero at the end; cells rounded to 0 stay in the
table as structural observations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError
from .reports import OntologyMap, ReportSet


@dataclass(frozen=True)
class ContingencyTable:
    """I x J drug-by-AE count table with cached margins."""

    drug_ids: tuple[str, ...]
    ae_ids: tuple[str, ...]
    counts: np.ndarray
    row_margins: np.ndarray
    col_margins: np.ndarray
    grand_total: int

    @classmethod
    def from_counts(
        cls,
        drug_ids: Sequence[str],
        ae_ids: Sequence[str],
        counts: np.ndarray,
    ) -> "ContingencyTable":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape != (len(drug_ids), len(ae_ids)):
            raise DataError("counts shape does not match drug/AE identifiers")
        if len(drug_ids) < 1 or len(ae_ids) < 1:
            raise DataError("table must have at least one drug and one AE")
        if (counts < 0).any():
            raise DataError("negative counts are not allowed")
        counts = counts.copy()
        counts.setflags(write=False)
        row = counts.sum(axis=1)
        col = counts.sum(axis=0)
        row.setflags(write=False)
        col.setflags(write=False)
        return cls(
            drug_ids=tuple(drug_ids),
            ae_ids=tuple(ae_ids),
            counts=counts,
            row_margins=row,
            col_margins=col,
            grand_total=int(counts.sum()),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def drug_index(self, drug_id: str) -> int:
        return self.drug_ids.index(drug_id)

    def ae_index(self, ae_id: str) -> int:
        return self.ae_ids.index(ae_id)

    def select_columns(self, ae_ids: Sequence[str]) -> "ContingencyTable":
        idx = [self.ae_ids.index(a) for a in ae_ids]
        return ContingencyTable.from_counts(self.drug_ids, ae_ids, self.counts[:, idx])


@dataclass(frozen=True)
class IngestSummary:
    """Bookkeeping from table construction."""

    n_reports: int
    n_used: int
    n_skipped: int
    n_exact_duplicates: int


def _round_half_away(w: Fraction) -> int:
    # floor(w + 1/2); weights are nonnegative, so half-up == half-away
    return (2 * w.numerator + w.denominator) // (2 * w.denominator)


def build_table(
    reports: ReportSet,
    drug_whitelist: Optional[Iterable[str]] = None,
    ae_whitelist: Optional[Iterable[str]] = None,
) -> ContingencyTable:
    """Accumulate weighted drug-AE incidences into an integer count table."""
    table, _ = build_table_with_summary(reports, drug_whitelist, ae_whitelist)
    return table


def build_table_with_summary(
    reports: ReportSet,
    drug_whitelist: Optional[Iterable[str]] = None,
    ae_whitelist: Optional[Iterable[str]] = None,
) -> tuple[ContingencyTable, IngestSummary]:
    if len(reports) == 0:
        raise DataError("no reports")
    drug_keep = None if drug_whitelist is None else set(drug_whitelist)
    ae_keep = None if ae_whitelist is None else set(ae_whitelist)
    if drug_keep is not None and not drug_keep:
        raise DataError("drug whitelist is empty")
    if ae_keep is not None and not ae_keep:
        raise DataError("AE whitelist is empty")

    weights: dict[tuple[str, str], Fraction] = {}
    n_used = 0
    n_skipped = 0
    for rep in reports:
        drugs = rep.drugs if drug_keep is None else rep.drugs & drug_keep
        events = rep.events if ae_keep is None else rep.events & ae_keep
        if not drugs or not events:
            n_skipped += 1
            continue
        n_used += 1
        w = Fraction(1, len(rep.drugs))
        for d in drugs:
            for e in events:
                key = (d, e)
                weights[key] = weights.get(key, Fraction(0)) + w

    if not weights:
        raise DataError("no reports survived the whitelists")

    drug_ids = sorted({d for d, _ in weights})
    ae_ids = sorted({e for _, e in weights})
    counts = np.zeros((len(drug_ids), len(ae_ids)), dtype=np.int64)
    drug_pos = {d: i for i, d in enumerate(drug_ids)}
    ae_pos = {e: j for j, e in enumerate(ae_ids)}
    for (d, e), w in weights.items():
        counts[drug_pos[d], ae_pos[e]] = _round_half_away(w)

    summary = IngestSummary(
        n_reports=len(reports),
        n_used=n_used,
        n_skipped=n_skipped,
        n_exact_duplicates=reports.exact_duplicate_count(),
    )
    return ContingencyTable.from_counts(drug_ids, ae_ids, counts), summary


def apply_filters(
    table: ContingencyTable,
    ontology: OntologyMap,
    min_ae_count: int = 15,
    min_group_size: int = 15,
) -> tuple[ContingencyTable, OntologyMap]:
    """Drop rare AE columns, then undersized AE groups; recompute margins.

    Idempotent for fixed thresholds: surviving columns keep their margins,
    so a second pass removes nothing.
    """
    if min_ae_count < 0 or min_group_size < 0:
        raise DataError("filter thresholds must be nonnegative")
    ontology.require_cover(table.ae_ids)

    surviving = [
        a for j, a in enumerate(table.ae_ids) if table.col_margins[j] >= min_ae_count
    ]
    group_sizes: dict[str, int] = {}
    for a in surviving:
        g = ontology.group_of(a)
        group_sizes[g] = group_sizes.get(g, 0) + 1
    surviving = [a for a in surviving if group_sizes[ontology.group_of(a)] >= min_group_size]
    if not surviving:
        raise DataError("empty table after filtering")

    filtered = table.select_columns(surviving)
    return filtered, ontology.restrict(surviving)


def expected_counts(table: ContingencyTable) -> np.ndarray:
    """Expected cell counts under drug-AE independence: n_i. * n_.j / n_.."""
    if table.grand_total <= 0:
        raise DataError("empty table")
    row = table.row_margins.astype(np.float64)
    col = table.col_margins.astype(np.float64)
    return np.outer(row, col) / float(table.grand_total)


def reporting_ratio(
    table: ContingencyTable, expected: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Relative reporting rate n/E and its binary log.

    Cells with n = 0 report RR = 0 and -inf on the log2 scale.
    """
    n = table.counts
    expected = np.asarray(expected, dtype=np.float64)
    if expected.shape != n.shape:
        raise DataError("expected-count matrix shape mismatch")
    bad = (expected <= 0) & (n > 0)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DataError(
            f"structural zero with observation at ({table.drug_ids[i]}, {table.ae_ids[j]})"
        )
    rr = np.zeros_like(expected)
    pos = n > 0
    rr[pos] = n[pos] / expected[pos]
    with np.errstate(divide="ignore"):
        info = np.where(pos, np.log2(np.where(pos, rr, 1.0)), -np.inf)
    return rr, info


TABLE_CSV_HEADER = ["drug_id", "ae_id", "group_id", "n", "E", "RR"]


def write_table_csv(
    path: str | Path,
    table: ContingencyTable,
    expected: np.ndarray,
    ontology: Optional[OntologyMap] = None,
) -> None:
    """Long-format export, one row per cell, lexicographic order."""
    rr, _ = reporting_ratio(table, expected)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_CSV_HEADER)
        for i, d in enumerate(table.drug_ids):
            for j, a in enumerate(table.ae_ids):
                group = ontology.group_of(a) if ontology is not None else ""
                writer.writerow(
                    [d, a, group, int(table.counts[i, j]), repr(float(expected[i, j])), repr(float(rr[i, j]))]
                )


def read_table_csv(
    path: str | Path,
) -> tuple[ContingencyTable, np.ndarray, Optional[OntologyMap]]:
    """Read a long-format table export back into memory."""
    path = Path(path)
    cells: dict[tuple[str, str], tuple[int, float]] = {}
    groups: dict[str, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TABLE_CSV_HEADER:
            raise DataError(f"{path}: expected header {TABLE_CSV_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 columns")
            d, a, g, n, e, _ = row
            cells[(d, a)] = (int(n), float(e))
            if g:
                groups[a] = g
    if not cells:
        raise DataError(f"{path}: no cells")
    drug_ids = sorted({d for d, _ in cells})
    ae_ids = sorted({a for _, a in cells})
    counts = np.zeros((len(drug_ids), len(ae_ids)), dtype=np.int64)
    expected = np.zeros((len(drug_ids), len(ae_ids)), dtype=np.float64)
    for i, d in enumerate(drug_ids):
        for j, a in enumerate(ae_ids):
            if (d, a) not in cells:
                raise DataError(f"{path}: missing cell ({d}, {a}); table export must be dense")
            counts[i, j], expected[i, j] = cells[(d, a)]
    table = ContingencyTable.from_counts(drug_ids, ae_ids, counts)
    ontology = OntologyMap(groups) if groups else None
    return table, expected, ontology


def reindex(
    table: ContingencyTable,
    drug_ids: Sequence[str],
    ae_ids: Sequence[str],
) -> ContingencyTable:
    """Force a table onto a fixed roster; absent rows/columns become zeros."""
    counts = np.zeros((len(drug_ids), len(ae_ids)), dtype=np.int64)
    dpos = {d: i for i, d in enumerate(table.drug_ids)}
    apos = {a: j for j, a in enumerate(table.ae_ids)}
    for i, d in enumerate(drug_ids):
        if d not in dpos:
            continue
        src = table.counts[dpos[d]]
        for j, a in enumerate(ae_ids):
            if a in apos:
                counts[i, j] = src[apos[a]]
    return ContingencyTable.from_counts(drug_ids, ae_ids, counts)
