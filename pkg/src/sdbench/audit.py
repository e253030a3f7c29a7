"""Leakage bookkeeping: every fit records the dates it saw."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import years_of


class LeakageError(AssertionError):
    pass


@dataclass
class DateAudit:
    """Records (context, dates) for every training pool, CV fold and PCA fit
    and counts how many of those dates fall in the held-out years."""

    test_years: tuple
    strict: bool = True
    records: list = field(default_factory=list)

    def record(self, context: str, dates) -> int:
        dates = np.asarray(dates, dtype="datetime64[D]")
        y = years_of(dates)
        lo, hi = self.test_years
        n_bad = int(np.count_nonzero((y >= lo) & (y <= hi)))
        self.records.append((context, int(dates.size), n_bad))
        if n_bad and self.strict:
            raise LeakageError(f"{context}: {n_bad} test-year date(s) in a training set")
        return n_bad

    def fold_hook(self, context: str):
        def hook(train_dates, valid_dates):
            self.record(f"{context}/cv-train", train_dates)
            self.record(f"{context}/cv-valid", valid_dates)
        return hook

    @property
    def leak_count(self) -> int:
        return sum(r[2] for r in self.records)

    def summary(self) -> dict:
        return {"checks": len(self.records), "dates_seen": sum(r[1] for r in self.records),
                "test_year_dates": self.leak_count}
