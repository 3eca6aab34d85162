"""Georeferenced grids and ESRI ASCII grid I/O.

Rasters are stored north-first: ``values[0, 0]`` is the north-west cell,
exactly as rows appear in an ``.asc`` file.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, CompatibilityError, DimensionError, RasterParseError

__all__ = [
    "GridSpec",
    "Raster",
    "read_ascii_grid",
    "write_ascii_grid",
    "cell_center",
    "cell_index",
    "require_compatible",
]

_HEADER_KEYS = ("ncols", "nrows", "xll", "yll", "cellsize", "nodata_value")
_KEY_ALIASES = {
    "ncols": "ncols",
    "nrows": "nrows",
    "xllcorner": "xll",
    "xllcenter": "xll",
    "yllcorner": "yll",
    "yllcenter": "yll",
    "cellsize": "cellsize",
    "nodata_value": "nodata_value",
}


@dataclass(frozen=True)
class GridSpec:
    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float = -9999.0

    def __post_init__(self):
        if int(self.ncols) != self.ncols or self.ncols < 1:
            raise ValueError(f"ncols must be a positive integer, got {self.ncols}")
        if int(self.nrows) != self.nrows or self.nrows < 1:
            raise ValueError(f"nrows must be a positive integer, got {self.nrows}")
        if not (self.cellsize > 0 and math.isfinite(self.cellsize)):
            raise ValueError(f"cellsize must be positive, got {self.cellsize}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def size(self) -> int:
        return self.nrows * self.ncols

    def compatible(self, other: "GridSpec") -> bool:
        return self == other

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) arrays of cell-center coordinates, each of shape (nrows, ncols)."""
        cols = np.arange(self.ncols)
        rows = np.arange(self.nrows)
        x = self.xll + (cols + 0.5) * self.cellsize
        y = self.yll + (self.nrows - rows - 0.5) * self.cellsize
        return np.broadcast_to(x, self.shape).copy(), np.broadcast_to(y[:, None], self.shape).copy()


def require_compatible(*specs: GridSpec) -> GridSpec:
    first = specs[0]
    for other in specs[1:]:
        if not first.compatible(other):
            raise CompatibilityError(f"incompatible grids: {first} vs {other}")
    return first


@dataclass(frozen=True, eq=False)
class Raster:
    """A grid of float64 values; cells equal to ``spec.nodata`` are missing."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.size != self.spec.size:
            raise DimensionError(
                f"expected {self.spec.size} cells, found {values.size}",
                expected=self.spec.size,
                found=values.size,
            )
        values = values.reshape(self.spec.shape)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def full(cls, spec: GridSpec, value: float) -> "Raster":
        return cls(spec, np.full(spec.shape, value, dtype=np.float64))

    @property
    def mask(self) -> np.ndarray:
        """True where the cell is missing."""
        return self.values == self.spec.nodata

    @property
    def valid(self) -> np.ndarray:
        return ~self.mask

    def masked(self, fill=np.nan) -> np.ndarray:
        """Writable copy of the values with missing cells replaced by ``fill``."""
        out = self.values.copy()
        out[self.mask] = fill
        return out

    def replace(self, values: np.ndarray, missing: np.ndarray | None = None) -> "Raster":
        """New raster on the same grid; cells flagged in ``missing`` (or NaN) become nodata."""
        values = np.array(values, dtype=np.float64).reshape(self.spec.shape)
        drop = ~np.isfinite(values)
        if missing is not None:
            drop |= missing
        values[drop] = self.spec.nodata
        return Raster(self.spec, values)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values, equal_nan=True)

    __hash__ = None


def _parse_number(key, token):
    try:
        return float(token)
    except ValueError:
        raise RasterParseError(f"header key {key!r} has non-numeric value {token!r}", key=key) from None


def read_ascii_grid(path) -> Raster:
    """Read an ESRI ASCII grid.

    Header keys are matched case-insensitively and may appear in any order.
    ``xllcenter``/``yllcenter`` are converted to corner coordinates.
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    header = {}
    centered = set()
    i = 0
    while len(header) < len(_HEADER_KEYS):
        if i >= len(lines):
            missing = [k for k in _HEADER_KEYS if k not in header]
            raise RasterParseError(f"missing header key {missing[0]!r}", key=missing[0])
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        raw = parts[0].lower()
        key = _KEY_ALIASES.get(raw)
        if key is None or len(parts) != 2:
            missing = [k for k in _HEADER_KEYS if k not in header]
            raise RasterParseError(
                f"malformed header line {lines[i - 1]!r}; expected key {missing[0]!r}",
                key=missing[0] if key is None else key,
            )
        if key in header:
            raise RasterParseError(f"duplicate header key {raw!r}", key=key)
        if raw.endswith("center"):
            centered.add(key)
        header[key] = _parse_number(raw, parts[1])

    for key in ("ncols", "nrows"):
        if header[key] != int(header[key]) or header[key] < 1:
            raise RasterParseError(f"header key {key!r} must be a positive integer", key=key)
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    cellsize = header["cellsize"]
    if not cellsize > 0:
        raise RasterParseError("header key 'cellsize' must be positive", key="cellsize")
    xll = header["xll"] - (0.5 * cellsize if "xll" in centered else 0.0)
    yll = header["yll"] - (0.5 * cellsize if "yll" in centered else 0.0)
    spec = GridSpec(ncols, nrows, xll, yll, cellsize, header["nodata_value"])

    tokens = " ".join(lines[i:]).split()
    if len(tokens) != spec.size:
        raise DimensionError(
            f"{path}: expected {spec.size} cells ({nrows} rows x {ncols} cols), found {len(tokens)}",
            expected=spec.size,
            found=len(tokens),
        )
    try:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise RasterParseError(f"{path}: non-numeric cell value ({exc})") from None
    return Raster(spec, values.reshape(nrows, ncols))


def format_float(value: float) -> str:
    """Shortest decimal that round-trips to the same float64."""
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def write_ascii_grid(raster: Raster, path) -> None:
    spec = raster.spec
    header = [
        ("ncols", str(spec.ncols)),
        ("nrows", str(spec.nrows)),
        ("xllcorner", format_float(spec.xll)),
        ("yllcorner", format_float(spec.yll)),
        ("cellsize", format_float(spec.cellsize)),
        ("NODATA_value", format_float(spec.nodata)),
    ]
    out = [f"{k:<14}{v}" for k, v in header]
    for row in raster.values:
        out.append(" ".join(format_float(v) for v in row))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(out) + "\n")
    os.replace(tmp, path)


def cell_center(spec: GridSpec, row: int, col: int) -> tuple[float, float]:
    if not (0 <= row < spec.nrows and 0 <= col < spec.ncols):
        raise BoundsError(f"cell ({row}, {col}) outside {spec.nrows}x{spec.ncols} grid")
    x = spec.xll + (col + 0.5) * spec.cellsize
    y = spec.yll + (spec.nrows - row - 0.5) * spec.cellsize
    return x, y


def cell_index(spec: GridSpec, x: float, y: float) -> tuple[int, int]:
    """Row and column of the cell containing point (x, y)."""
    col = math.floor((x - spec.xll) / spec.cellsize)
    row = spec.nrows - 1 - math.floor((y - spec.yll) / spec.cellsize)
    if not (0 <= row < spec.nrows and 0 <= col < spec.ncols):
        raise BoundsError(f"point ({x}, {y}) lies outside the grid")
    return int(row), int(col)
