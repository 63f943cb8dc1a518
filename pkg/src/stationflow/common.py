"""Shared value types and error classes."""

from __future__ import annotations

import calendar
import re
from dataclasses import dataclass
from functools import total_ordering


class ConfigError(ValueError):
    """Bad or missing configuration; always fatal."""


class DataError(ValueError):
    """Input data violates a contract; always fatal."""


_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


@total_ordering
@dataclass(frozen=True)
class Month:
    """A calendar month ("YYYY-MM" externally), ordered chronologically."""

    year: int
    month: int

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise ValueError(f"month out of range: {self.month}")

    @classmethod
    def parse(cls, text: str) -> "Month":
        m = _MONTH_RE.match(text.strip())
        if not m:
            raise DataError(f"expected YYYY-MM, got {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    @classmethod
    def of(cls, dt) -> "Month":
        """Month containing a date or datetime."""
        return cls(dt.year, dt.month)

    @property
    def index(self) -> int:
        """Months since year 0; subtraction of indexes gives month deltas."""
        return self.year * 12 + self.month - 1

    @classmethod
    def from_index(cls, idx: int) -> "Month":
        return cls(idx // 12, idx % 12 + 1)

    def add(self, n: int) -> "Month":
        return Month.from_index(self.index + n)

    @property
    def month_index(self) -> int:
        """Calendar month as 0..11 (January = 0)."""
        return self.month - 1

    def days(self) -> int:
        return calendar.monthrange(self.year, self.month)[1]

    def __lt__(self, other: "Month") -> bool:
        return self.index < other.index

    def __str__(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"
