"""Month arithmetic and the ``<name>_<YYYY>_<MM>.asc`` filename convention."""
from __future__ import annotations

import re
from pathlib import Path
from typing import NamedTuple

from .errors import ValidationError


class Month(NamedTuple):
    year: int
    month: int

    @classmethod
    def parse(cls, text: str) -> "Month":
        m = re.fullmatch(r"\s*(\d{4})[-_/](\d{1,2})\s*", text)
        if not m or not 1 <= int(m.group(2)) <= 12:
            raise ValidationError(f"bad month {text!r}; expected YYYY-MM")
        return cls(int(m.group(1)), int(m.group(2)))

    def shift(self, n: int) -> "Month":
        k = self.year * 12 + (self.month - 1) + n
        return Month(k // 12, k % 12 + 1)

    def __str__(self):
        return f"{self.year:04d}-{self.month:02d}"

    @property
    def tag(self) -> str:
        return f"{self.year:04d}_{self.month:02d}"


def month_range(start: Month, stop: Month) -> list[Month]:
    """Inclusive range of months."""
    out = []
    m = start
    while (m.year, m.month) <= (stop.year, stop.month):
        out.append(m)
        m = m.shift(1)
    return out


def parse_month_span(text: str) -> list[Month]:
    """``2013-01:2016-12`` -> every month in between, inclusive."""
    a, _, b = text.partition(":")
    start = Month.parse(a)
    stop = Month.parse(b) if b else start
    months = month_range(start, stop)
    if not months:
        raise ValidationError(f"empty month span {text!r}")
    return months


def dynamic_path(directory, name: str, month: Month) -> Path:
    return Path(directory) / f"{name}_{month.tag}.asc"


def static_path(directory, name: str) -> Path:
    return Path(directory) / f"{name}.asc"


_DYNAMIC_RE = re.compile(r"^(?P<name>.+)_(?P<year>\d{4})_(?P<month>\d{2})\.asc$")


def scan_covariate_dir(directory) -> tuple[list[str], dict[str, list[Month]]]:
    """Static covariate names and, per dynamic covariate, the months on disk."""
    static, dynamic = [], {}
    for p in sorted(Path(directory).glob("*.asc")):
        m = _DYNAMIC_RE.match(p.name)
        if m:
            dynamic.setdefault(m["name"], []).append(Month(int(m["year"]), int(m["month"])))
        else:
            static.append(p.stem)
    return static, {k: sorted(v) for k, v in dynamic.items()}
