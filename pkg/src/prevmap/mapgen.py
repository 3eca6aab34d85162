"""Summary products from posterior prevalence cubes.

All functions are deterministic reductions of the samples; percentiles use
linear interpolation between order statistics (numpy's default).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AggregationError, CompatibilityError, ValidationError
from .months import Month
from .prevalence import PosteriorSampleCube
from .raster import Raster, format_float

logger = logging.getLogger(__name__)

BANDS = (2.5, 50.0, 97.5)


@dataclass
class ZoneMap:
    raster: Raster
    legend: dict[int, str] | None = None

    def labels(self) -> list[int]:
        vals = self.raster.values[self.raster.valid]
        return sorted(int(v) for v in np.unique(vals))

    def name(self, label: int) -> str:
        if self.legend and label in self.legend:
            return self.legend[label]
        return str(label)


@dataclass
class SeriesRow:
    period: str
    zone: str
    mean: float
    lo: float
    median: float
    hi: float


def _weighted_means(samples: np.ndarray, weights: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Per-sample weighted mean over ``cells``; samples has shape (S, R, C)."""
    w = weights[cells]
    vals = samples[:, cells]
    return (vals * w).sum(axis=1) / w.sum()


def weighted_series(
    cube: PosteriorSampleCube,
    population: Raster,
    zones: ZoneMap | None = None,
) -> list[SeriesRow]:
    """Population-weighted mean prevalence per month (and zone) with 2.5/50/97.5 bands."""
    if population.spec != cube.spec or (zones is not None and zones.raster.spec != cube.spec):
        raise CompatibilityError("cube, population and zone grids differ")
    pop = population.masked(0.0)
    if np.any(pop < 0):
        raise ValidationError("population must be non-negative")
    finite = np.all(np.isfinite(cube.data), axis=(0, 1))
    base = finite & population.valid
    groups = [("all", base)]
    if zones is not None:
        zr = zones.raster
        for lab in zones.labels():
            groups.append((zones.name(lab), base & zr.valid & (zr.values == lab)))
    rows = []
    for t, month in enumerate(cube.months):
        for name, cells in groups:
            if pop[cells].sum() <= 0:
                logger.warning("zone %s has zero population; skipped", name)
                continue
            means = _weighted_means(cube.data[:, t], pop, cells)
            lo, med, hi = np.percentile(means, BANDS)
            rows.append(SeriesRow(str(month), name, float(means.mean()), float(lo), float(med), float(hi)))
    return rows


def weighted_mean_samples(samples: np.ndarray, population: Raster, cells: np.ndarray | None = None) -> np.ndarray:
    pop = population.masked(0.0)
    ok = np.all(np.isfinite(samples), axis=0) & population.valid
    if cells is not None:
        ok &= cells
    return _weighted_means(samples, pop, ok)


def annual_mean_prevalence(cube: PosteriorSampleCube, year: int, weights: Sequence[float] | None = None) -> np.ndarray:
    """Per-sample, per-pixel mean of the year's 12 monthly prevalences, shape (S, R, C).

    ``weights`` optionally weights the months (e.g. by population-months).
    """
    idx = [t for t, m in enumerate(cube.months) if m.year == year]
    if len(idx) != 12 or sorted(cube.months[t].month for t in idx) != list(range(1, 13)):
        raise AggregationError(f"year {year} has {len(idx)} months in the cube, expected 12")
    block = cube.data[:, idx]
    if weights is None:
        return block.mean(axis=1)
    w = np.asarray(weights, dtype=float)
    if w.shape != (12,) or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("month weights must be 12 non-negative numbers with positive sum")
    return np.tensordot(w / w.sum(), block, axes=([0], [1]))


def exceedance(samples: np.ndarray, threshold: float, direction: str = "above") -> np.ndarray:
    """Share of samples strictly above (or at-or-below, for ``below``) the threshold, per pixel."""
    if not 0 <= threshold <= 1:
        raise ValidationError("threshold must lie in [0, 1]")
    samples = np.asarray(samples, dtype=float)
    if direction == "above":
        hits = samples > threshold
    elif direction == "below":
        hits = samples <= threshold
    else:
        raise ValidationError(f"direction must be 'above' or 'below', not {direction!r}")
    out = hits.mean(axis=0)
    out[~np.all(np.isfinite(samples), axis=0)] = np.nan
    return out


def iqr_map(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 4:
        raise ValidationError("need at least 4 samples for an interquartile range")
    q25, q75 = np.percentile(samples, [25.0, 75.0], axis=0)
    return q75 - q25


def to_raster(values: np.ndarray, template: Raster | PosteriorSampleCube) -> Raster:
    spec = template.spec
    return Raster.full(spec, spec.nodata).replace(values)


def write_series_csv(rows: Sequence[SeriesRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "zone", "mean", "lo2.5", "hi97.5", "median"])
        for r in rows:
            w.writerow([r.period, r.zone, format_float(r.mean), format_float(r.lo), format_float(r.hi),
                        format_float(r.median)])


def parse_products(text: str) -> list[tuple]:
    """``mean,iqr,exceed:0.15:above`` -> [("mean",), ("iqr",), ("exceed", 0.15, "above")]."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        kind = parts[0]
        if kind in ("mean", "median", "iqr", "series"):
            out.append((kind,))
        elif kind in ("exceed", "not-exceed"):
            if len(parts) not in (2, 3):
                raise ValidationError(f"bad product {item!r}; expected exceed:<threshold>[:above|below]")
            direction = parts[2] if len(parts) == 3 else ("above" if kind == "exceed" else "below")
            out.append(("exceed", float(parts[1]), direction))
        else:
            raise ValidationError(f"unknown product {kind!r}")
    return out


def years_in(months: Sequence[Month]) -> list[int]:
    """Years with all 12 months present."""
    years = sorted({m.year for m in months})
    return [y for y in years if sum(1 for m in months if m.year == y) == 12]
