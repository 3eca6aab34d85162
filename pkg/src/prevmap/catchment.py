"""Travel-time catchment populations for health facilities.

Travel time from every pixel to every facility is a least-cost path over the
8-connected grid of the friction surface.  A person in a pixel who seeks
treatment picks facility j with probability proportional to t_j**-2, and the
share of a pixel's population that seeks treatment at all falls off
logistically with the travel time to the nearest facility.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import DomainError, PlacementError, UnreachablePixelError, ValidationError
from .months import Month
from .raster import GridSpec, Raster, cell_index, require_compatible

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
# (drow, dcol, length factor); only half the neighbourhood, edges are added both ways
_HALF_NEIGHBOURHOOD = ((0, 1, 1.0), (1, -1, SQRT2), (1, 0, 1.0), (1, 1, SQRT2))


@dataclass(frozen=True)
class SeekCurveParams:
    alpha: float = 0.6
    sigma_seek: float = 0.00916
    beta_seek: float = 0.15

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 <= self.beta_seek <= 1:
            raise ValidationError(f"beta_seek must lie in [0, 1], got {self.beta_seek}")
        if self.alpha + self.beta_seek > 1:
            raise ValidationError("alpha + beta_seek must not exceed 1")
        if not self.sigma_seek > 0:
            raise ValidationError(f"sigma_seek must be > 0, got {self.sigma_seek}")


class FrictionSurface:
    """Minutes needed to cross each cell; missing cells are impassable."""

    def __init__(self, raster: Raster):
        vals = raster.values[raster.valid]
        if np.any(~(vals > 0)) or np.any(~np.isfinite(vals)):
            raise ValidationError("friction values must be finite and > 0 on non-missing cells")
        self.raster = raster
        self._graph = None

    @property
    def spec(self) -> GridSpec:
        return self.raster.spec

    def graph(self):
        """Sparse symmetric adjacency matrix of edge costs, built once."""
        if self._graph is None:
            self._graph = _friction_graph(self.raster)
        return self._graph


def _friction_graph(raster: Raster):
    nrows, ncols = raster.spec.shape
    fr = raster.values
    ok = raster.valid
    idx = np.arange(nrows * ncols).reshape(nrows, ncols)
    src, dst, cost = [], [], []
    for dr, dc, factor in _HALF_NEIGHBOURHOOD:
        r0 = slice(0, nrows - dr)
        r1 = slice(dr, nrows)
        c0 = slice(max(0, -dc), ncols - max(0, dc))
        c1 = slice(max(0, dc), ncols - max(0, -dc))
        both = ok[r0, c0] & ok[r1, c1]
        a = idx[r0, c0][both]
        b = idx[r1, c1][both]
        w = 0.5 * (fr[r0, c0][both] + fr[r1, c1][both]) * factor
        src += [a, b]
        dst += [b, a]
        cost += [w, w]
    n = nrows * ncols
    src = np.concatenate(src) if src else np.empty(0, int)
    dst = np.concatenate(dst) if dst else np.empty(0, int)
    cost = np.concatenate(cost) if cost else np.empty(0)
    return coo_matrix((cost, (src, dst)), shape=(n, n)).tocsr()


@dataclass
class Facility:
    id: str
    row: int
    col: int
    monthly_cases: np.ndarray = field(default_factory=lambda: np.zeros(0))
    catchment_population: float | None = None


@dataclass(frozen=True, eq=False)
class TravelTimeField:
    facility_id: str
    raster: Raster

    def minutes(self) -> np.ndarray:
        """Travel times with unreachable/missing cells as +inf."""
        return self.raster.masked(np.inf)


def _check_placement(friction: FrictionSurface, facility: Facility):
    spec = friction.spec
    if not (0 <= facility.row < spec.nrows and 0 <= facility.col < spec.ncols):
        raise PlacementError(f"facility {facility.id} lies outside the grid")
    if friction.raster.mask[facility.row, facility.col]:
        raise PlacementError(f"facility {facility.id} sits on a missing friction cell")


def travel_time_matrix(friction: FrictionSurface, facilities: Sequence[Facility]) -> np.ndarray:
    """Minutes from each facility to every cell, shape (n_facilities, nrows, ncols); inf if unreachable."""
    for fac in facilities:
        _check_placement(friction, fac)
    spec = friction.spec
    if not facilities:
        return np.empty((0,) + spec.shape)
    sources = [f.row * spec.ncols + f.col for f in facilities]
    dist = dijkstra(friction.graph(), directed=True, indices=sources)
    dist = np.atleast_2d(dist).reshape(len(facilities), *spec.shape)
    dist[:, friction.raster.mask] = np.inf
    return dist


def travel_time(friction: FrictionSurface, facility: Facility) -> TravelTimeField:
    minutes = travel_time_matrix(friction, [facility])[0]
    return TravelTimeField(facility.id, friction.raster.replace(minutes))


def seek_probability(t, params: SeekCurveParams = SeekCurveParams()):
    """Proportion of people who seek treatment at all, given minutes to the nearest facility."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(np.isnan(t_arr)):
        raise DomainError("travel time must be >= 0")
    with np.errstate(over="ignore"):
        out = params.alpha / (1.0 + np.exp(params.sigma_seek * t_arr)) + params.beta_seek
    return float(out) if np.ndim(out) == 0 else out


def _allocation(times: np.ndarray) -> np.ndarray:
    """Inverse-square-time shares along axis 0; columns with no finite time are all zero."""
    times = np.asarray(times, dtype=np.float64)
    finite = np.isfinite(times)
    zero = times == 0
    any_zero = zero.any(axis=0)
    with np.errstate(divide="ignore"):
        w = np.where(finite & ~zero, 1.0 / np.where(finite & ~zero, times, 1.0) ** 2, 0.0)
    w = np.where(any_zero, zero.astype(np.float64), w)
    total = w.sum(axis=0)
    return np.divide(w, total, out=np.zeros_like(w), where=total > 0)


def allocation_probabilities(times: Sequence[TravelTimeField], pixel: tuple[int, int]) -> np.ndarray:
    """Probability that a treatment seeker in ``pixel`` goes to each facility."""
    r, c = pixel
    t = np.array([f.minutes()[r, c] for f in times])
    if not np.isfinite(t).any():
        raise UnreachablePixelError(f"pixel {pixel} is unreachable from every facility")
    return _allocation(t)


@dataclass
class CatchmentResult:
    populations: np.ndarray  # E_j in facility order
    seeking_population: Raster  # treatment-seeking population per pixel (reachable cells only)
    unreachable: list[tuple[int, int]]  # populated cells no facility can reach
    nearest_minutes: np.ndarray


def compute_catchments(
    friction: FrictionSurface,
    population: Raster,
    facilities: Sequence[Facility],
    params: SeekCurveParams = SeekCurveParams(),
    times: np.ndarray | None = None,
) -> CatchmentResult:
    require_compatible(friction.spec, population.spec)
    pop = population.masked(0.0)
    if np.any(pop < 0):
        raise ValidationError("population must be non-negative")
    if times is None:
        times = travel_time_matrix(friction, facilities)
    tmin = times.min(axis=0) if len(facilities) else np.full(population.spec.shape, np.inf)
    reachable = np.isfinite(tmin)
    seeking = np.zeros_like(pop)
    seeking[reachable] = pop[reachable] * seek_probability(tmin[reachable], params)
    shares = _allocation(times)
    flat_shares = shares.reshape(len(facilities), -1)
    E = np.array([float(np.dot(flat_shares[j], seeking.ravel())) for j in range(len(facilities))])
    unreachable = [tuple(map(int, rc)) for rc in np.argwhere(~reachable & (pop > 0))]
    if unreachable:
        logger.warning("%d populated pixels are unreachable from every facility", len(unreachable))
    return CatchmentResult(E, population.replace(seeking, missing=~reachable), unreachable, tmin)


def catchment_populations(
    friction: FrictionSurface,
    population: Raster,
    facilities: Sequence[Facility],
    params: SeekCurveParams = SeekCurveParams(),
) -> list[Facility]:
    result = compute_catchments(friction, population, facilities, params)
    return [replace(f, catchment_population=float(e)) for f, e in zip(facilities, result.populations)]


# --------------------------------------------------------------------------
# facility panels and CSV formats


@dataclass
class FacilityPanel:
    """Facilities with monthly case counts and per-year catchment populations.

    ``cases`` has shape (n_facilities, n_months) with NaN for unreported months.
    ``catchments`` maps year -> array of catchment populations in facility order.
    """

    ids: list[str]
    x: np.ndarray
    y: np.ndarray
    months: list[Month]
    cases: np.ndarray
    catchments: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def exposure(self, t: int) -> np.ndarray:
        """Catchment populations that apply to month index ``t``."""
        year = self.months[t].year
        if year not in self.catchments:
            raise ValidationError(f"no catchment populations for year {year}")
        return self.catchments[year]

    def coords(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def subset(self, index) -> "FacilityPanel":
        index = np.asarray(index)
        return FacilityPanel(
            [self.ids[i] for i in index],
            self.x[index],
            self.y[index],
            list(self.months),
            self.cases[index],
            {yr: e[index] for yr, e in self.catchments.items()},
        )

    def to_facilities(self, spec: GridSpec) -> list[Facility]:
        out = []
        for i, fid in enumerate(self.ids):
            r, c = cell_index(spec, self.x[i], self.y[i])
            out.append(Facility(fid, r, c, self.cases[i]))
        return out


def _parse_count(text: str) -> float:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        return np.nan
    v = float(text)
    if v < 0:
        raise ValidationError(f"negative case count {text!r}")
    return v


def read_facilities_csv(path) -> FacilityPanel:
    """Columns facility_id, x, y, cases_YYYY_MM..., optionally catchment_YYYY..."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for req in ("facility_id", "x", "y"):
            if req not in cols:
                raise ValidationError(f"{path}: missing column {req!r}")
        case_cols = [c for c in cols if c.startswith("cases_")]
        months = [Month.parse(c[len("cases_"):]) for c in case_cols]
        catch_cols = [c for c in cols if c.startswith("catchment_")]
        ids, xs, ys, cases, catch = [], [], [], [], []
        for rec in reader:
            ids.append(rec["facility_id"])
            xs.append(float(rec["x"]))
            ys.append(float(rec["y"]))
            cases.append([_parse_count(rec[c]) for c in case_cols])
            catch.append([float(rec[c]) for c in catch_cols])
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate facility ids")
    catch = np.array(catch, dtype=float).reshape(len(ids), len(catch_cols))
    catchments = {int(c[len("catchment_"):]): catch[:, k] for k, c in enumerate(catch_cols)}
    return FacilityPanel(
        ids, np.array(xs), np.array(ys), months,
        np.array(cases, dtype=float).reshape(len(ids), len(months)), catchments,
    )


def write_facilities_csv(panel: FacilityPanel, path) -> None:
    from .raster import format_float

    years = sorted(panel.catchments)
    header = ["facility_id", "x", "y"] + [f"cases_{m.tag}" for m in panel.months]
    header += [f"catchment_{yr}" for yr in years]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, fid in enumerate(panel.ids):
            row = [fid, format_float(panel.x[i]), format_float(panel.y[i])]
            row += ["" if np.isnan(c) else str(int(c)) for c in panel.cases[i]]
            row += [format_float(panel.catchments[yr][i]) for yr in years]
            w.writerow(row)


def write_catchments_csv(panel: FacilityPanel, path) -> None:
    from .raster import format_float

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["facility_id", "year", "catchment_population"])
        for yr in sorted(panel.catchments):
            for fid, e in zip(panel.ids, panel.catchments[yr]):
                w.writerow([fid, yr, format_float(e)])


def read_catchments_csv(path) -> dict[int, dict[str, float]]:
    out: dict[int, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.setdefault(int(rec["year"]), {})[rec["facility_id"]] = float(rec["catchment_population"])
    return out


def attach_catchments(panel: FacilityPanel, table: dict[int, dict[str, float]]) -> FacilityPanel:
    """Use externally supplied catchment populations (e.g. official figures) instead of modelled ones."""
    catchments = {}
    for yr, by_id in table.items():
        missing = [i for i in panel.ids if i not in by_id]
        if missing:
            raise ValidationError(f"year {yr}: no catchment population for {missing[:5]}")
        catchments[yr] = np.array([by_id[i] for i in panel.ids], dtype=float)
    return replace(panel, catchments=catchments)


def write_unreachable_csv(rows: list[tuple[int, int, int]], spec: GridSpec, path) -> None:
    from .raster import cell_center, format_float

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "row", "col", "x", "y"])
        for yr, r, c in rows:
            x, y = cell_center(spec, r, c)
            w.writerow([yr, r, c, format_float(x), format_float(y)])
