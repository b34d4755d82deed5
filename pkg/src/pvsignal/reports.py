"""Individual case safety reports and the AE-to-group ontology mapping.

Report CSV format: columns ``report_id, drugs, events`` where drugs/events
are ``;``-separated identifier lists (UTF-8, header required).
Ontology CSV format: columns ``ae_id, group_id``.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import DataError

REPORT_CSV_HEADER = ["report_id", "drugs", "events"]
ONTOLOGY_CSV_HEADER = ["ae_id", "group_id"]


@dataclass(frozen=True)
class IcsrReport:
    """One spontaneous report: the drugs taken and the AEs observed."""

    report_id: str
    drugs: frozenset[str]
    events: frozenset[str]

    def __post_init__(self):
        if not self.drugs:
            raise DataError(f"report {self.report_id!r} has no drugs")
        if not self.events:
            raise DataError(f"report {self.report_id!r} has no events")


class ReportSet:
    """Ordered collection of reports with unique ids; the permutation unit.

    Exact duplicates (same drug set and AE set under different ids) are
    retained; deduplication is the caller's concern.
    """

    def __init__(self, reports: Iterable[IcsrReport]):
        self.reports: tuple[IcsrReport, ...] = tuple(reports)
        seen: set[str] = set()
        for rep in self.reports:
            if rep.report_id in seen:
                raise DataError(f"duplicate report_id {rep.report_id!r}")
            seen.add(rep.report_id)

    def __len__(self) -> int:
        return len(self.reports)

    def __iter__(self) -> Iterator[IcsrReport]:
        return iter(self.reports)

    def __getitem__(self, i: int) -> IcsrReport:
        return self.reports[i]

    def exact_duplicate_count(self) -> int:
        """Reports that repeat an earlier (drugs, events) combination."""
        combos = Counter((rep.drugs, rep.events) for rep in self.reports)
        return sum(k - 1 for k in combos.values() if k > 1)

    @classmethod
    def from_csv(cls, path: str | Path) -> "ReportSet":
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != REPORT_CSV_HEADER:
                raise DataError(
                    f"{path}: expected header {REPORT_CSV_HEADER}, got {header}"
                )
            reports = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
                rid, drugs, events = row
                reports.append(
                    IcsrReport(
                        report_id=rid,
                        drugs=frozenset(d for d in drugs.split(";") if d),
                        events=frozenset(e for e in events.split(";") if e),
                    )
                )
        return cls(reports)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_CSV_HEADER)
            for rep in self.reports:
                writer.writerow(
                    [rep.report_id, ";".join(sorted(rep.drugs)), ";".join(sorted(rep.events))]
                )


@dataclass(frozen=True)
class OntologyMap:
    """Total map from AE identifier to exactly one group identifier."""

    ae_to_group: Mapping[str, str]

    def group_of(self, ae_id: str) -> str:
        try:
            return self.ae_to_group[ae_id]
        except KeyError:
            raise DataError(f"AE {ae_id!r} has no group in the ontology") from None

    def groups(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.ae_to_group.values())))

    def members(self, group_id: str) -> tuple[str, ...]:
        return tuple(sorted(a for a, g in self.ae_to_group.items() if g == group_id))

    def require_cover(self, ae_ids: Iterable[str]) -> None:
        missing = sorted(a for a in ae_ids if a not in self.ae_to_group)
        if missing:
            raise DataError(f"ontology does not cover AEs: {missing}")

    def restrict(self, ae_ids: Iterable[str]) -> "OntologyMap":
        keep = set(ae_ids)
        return OntologyMap({a: g for a, g in self.ae_to_group.items() if a in keep})

    @classmethod
    def from_csv(cls, path: str | Path) -> "OntologyMap":
        path = Path(path)
        mapping: dict[str, str] = {}
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ONTOLOGY_CSV_HEADER:
                raise DataError(
                    f"{path}: expected header {ONTOLOGY_CSV_HEADER}, got {header}"
                )
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
                ae, group = row
                if ae in mapping and mapping[ae] != group:
                    raise DataError(f"{path}:{lineno}: AE {ae!r} mapped to two groups")
                mapping[ae] = group
        return cls(mapping)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(ONTOLOGY_CSV_HEADER)
            for ae in sorted(self.ae_to_group):
                writer.writerow([ae, self.ae_to_group[ae]])
