"""Georeferenced raster grids: ESRI ASCII I/O, block aggregation, statistics, PNG rendering.

Cells are held as a 2-D float64 array whose first row is the northernmost
row (the same order as an ESRI ASCII file). The lower-left corner of the
grid sits at ``(origin_easting, origin_northing)``.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
_CENTER_KEYS = {"xllcenter": "xllcorner", "yllcenter": "yllcorner"}

# Evenly spaced RGB stops. "viridis" is sampled from matplotlib's viridis at
# t = 0, 1/8, ..., 1 so renders are reproducible without matplotlib.
COLOR_RAMPS: dict[str, tuple[tuple[int, int, int], ...]] = {
    "viridis": (
        (68, 1, 84),
        (70, 50, 127),
        (54, 92, 141),
        (39, 127, 142),
        (31, 161, 135),
        (74, 194, 109),
        (159, 218, 58),
        (253, 231, 37),
    ),
    "greys": ((0, 0, 0), (255, 255, 255)),
    "terrain": (
        (51, 51, 153),
        (0, 153, 255),
        (0, 204, 102),
        (255, 255, 153),
        (128, 92, 84),
        (255, 255, 255),
    ),
}


class GridError(ValueError):
    """Invalid grid contents or arguments."""


class GridParseError(GridError):
    """Malformed ESRI ASCII grid text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable 2-D raster with a NODATA sentinel.

    Attributes:
        cells: float64 array of shape (n_rows, n_cols), northernmost row first.
        cell_size: Side length of a (square) cell in metres.
        origin_easting: Easting of the lower-left grid corner.
        origin_northing: Northing of the lower-left grid corner.
        nodata_value: Sentinel marking missing cells.
    """

    cells: np.ndarray
    cell_size: float
    origin_easting: float = 0.0
    origin_northing: float = 0.0
    nodata_value: float = DEFAULT_NODATA

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.float64, copy=True)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise GridError(f"cells must be a non-empty 2-D array, got shape {cells.shape}")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise GridError(f"cell_size must be positive, got {self.cell_size}")
        if not math.isfinite(self.nodata_value):
            raise GridError("nodata_value must be finite")
        if not np.all(np.isfinite(cells) | (cells == self.nodata_value)):
            raise GridError("cells must be finite numbers or the nodata value")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin_easting", float(self.origin_easting))
        object.__setattr__(self, "origin_northing", float(self.origin_northing))
        object.__setattr__(self, "nodata_value", float(self.nodata_value))

    @property
    def n_rows(self) -> int:
        return self.cells.shape[0]

    @property
    def n_cols(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def valid_mask(self) -> np.ndarray:
        return self.cells != self.nodata_value

    def masked(self) -> np.ndarray:
        """Cells as a float array with NaN in place of NODATA."""
        out = self.cells.copy()
        out[~self.valid_mask] = np.nan
        return out

    def with_cells(self, cells: np.ndarray) -> Grid:
        """New grid with the same georeferencing. NaN cells become NODATA."""
        cells = np.array(cells, dtype=np.float64)
        cells[~np.isfinite(cells)] = self.nodata_value
        return Grid(cells, self.cell_size, self.origin_easting, self.origin_northing, self.nodata_value)

    def cell_index(self, easting, northing):
        """(row, col) of the cell containing a point; row 0 is the northernmost row.

        Points on a cell boundary resolve by ``floor((coord - origin) / cell_size)``.
        Works elementwise on arrays; indices may fall outside the grid.
        """
        col = np.floor((np.asarray(easting, dtype=float) - self.origin_easting) / self.cell_size)
        row_up = np.floor((np.asarray(northing, dtype=float) - self.origin_northing) / self.cell_size)
        row = self.n_rows - 1 - row_up
        return row.astype(np.int64), col.astype(np.int64)

    def cell_center(self, row, col):
        """Easting/northing of cell centres (elementwise)."""
        row = np.asarray(row)
        col = np.asarray(col)
        e = self.origin_easting + (col + 0.5) * self.cell_size
        n = self.origin_northing + (self.n_rows - row - 0.5) * self.cell_size
        return e, n

    def header(self) -> dict:
        return {
            "ncols": self.n_cols,
            "nrows": self.n_rows,
            "xllcorner": self.origin_easting,
            "yllcorner": self.origin_northing,
            "cellsize": self.cell_size,
            "nodata_value": self.nodata_value,
        }

    def same_georef(self, other: Grid) -> bool:
        return (
            self.shape == other.shape
            and self.cell_size == other.cell_size
            and self.origin_easting == other.origin_easting
            and self.origin_northing == other.origin_northing
        )

    def fingerprint(self) -> str:
        """SHA-256 over header and cell bytes."""
        h = hashlib.sha256()
        h.update(repr(sorted(self.header().items())).encode())
        h.update(np.ascontiguousarray(self.cells, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.same_georef(other)
            and self.nodata_value == other.nodata_value
            and np.array_equal(self.cells, other.cells)
        )

    __hash__ = None


@dataclass(frozen=True)
class GridStats:
    mean: float
    sd: float
    valid_count: int


def format_value(v: float) -> str:
    """Shortest round-trip decimal for a float; integral values drop the ``.0``."""
    s = repr(float(v))
    if s.endswith(".0"):
        s = s[:-2]
    return s


def _parse_number(token: str, line: int, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise GridParseError(f"non-numeric {what} {token!r}", line) from None
    if not math.isfinite(value):
        raise GridParseError(f"non-finite {what} {token!r}", line)
    return value


def read_ascii_grid(source: str | Path | IO[str]) -> Grid:
    """Parse an ESRI ASCII grid from a path or text stream.

    Header keys are case-insensitive and may appear in any order before the
    data. ``xllcenter``/``yllcenter`` are accepted and converted to corners.
    A missing ``nodata_value`` defaults to -9999.

    Raises:
        GridParseError: on a malformed header, a non-numeric token or a value
            count that does not match ``nrows * ncols``.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return read_ascii_grid(fh)

    header: dict[str, float] = {}
    centered: set[str] = set()
    values: list[float] = []
    lineno = 0
    for lineno, raw in enumerate(source, start=1):
        tokens = raw.split()
        if not tokens:
            continue
        key = tokens[0].lower()
        if not values and (key in _HEADER_KEYS or key in _CENTER_KEYS):
            if len(tokens) != 2:
                raise GridParseError(f"header entry {tokens[0]!r} needs exactly one value", lineno)
            if key in _CENTER_KEYS:
                centered.add(key)
                key = _CENTER_KEYS[key]
            if key in header:
                raise GridParseError(f"duplicate header key {tokens[0]!r}", lineno)
            header[key] = _parse_number(tokens[1], lineno, f"header value for {tokens[0]}")
            continue
        if not values:
            missing = [k for k in _HEADER_KEYS[:5] if k not in header]
            if missing:
                raise GridParseError(f"missing header keys {missing} before data", lineno)
        for tok in tokens:
            values.append(_parse_number(tok, lineno, "cell value"))

    missing = [k for k in _HEADER_KEYS[:5] if k not in header]
    if missing:
        raise GridParseError(f"missing header keys {missing}", lineno or None)
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise GridParseError(f"nrows/ncols must be positive integers, got {nrows}/{ncols}")
    ncols, nrows = int(ncols), int(nrows)
    cellsize = header["cellsize"]
    if cellsize <= 0:
        raise GridParseError(f"cellsize must be positive, got {cellsize}")
    if len(values) != nrows * ncols:
        raise GridParseError(f"expected {nrows * ncols} values, found {len(values)}", lineno)

    x0, y0 = header["xllcorner"], header["yllcorner"]
    if "xllcenter" in centered:
        x0 -= cellsize / 2
    if "yllcenter" in centered:
        y0 -= cellsize / 2
    nodata = header.get("nodata_value", DEFAULT_NODATA)
    cells = np.array(values, dtype=np.float64).reshape(nrows, ncols)
    try:
        return Grid(cells, cellsize, x0, y0, nodata)
    except GridError as exc:
        raise GridParseError(str(exc)) from None


def write_ascii_grid(grid: Grid, dest: str | Path | IO[str]) -> None:
    """Write ``grid`` as ESRI ASCII, one line per row, northernmost row first.

    Numbers use the shortest decimal that round-trips exactly (Python
    ``repr``), so reading the file back reproduces every cell bit for bit.
    """
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            write_ascii_grid(grid, fh)
        return
    dest.write(f"ncols {grid.n_cols}\n")
    dest.write(f"nrows {grid.n_rows}\n")
    dest.write(f"xllcorner {format_value(grid.origin_easting)}\n")
    dest.write(f"yllcorner {format_value(grid.origin_northing)}\n")
    dest.write(f"cellsize {format_value(grid.cell_size)}\n")
    dest.write(f"NODATA_value {format_value(grid.nodata_value)}\n")
    for row in grid.cells:
        dest.write(" ".join(format_value(v) for v in row.tolist()))
        dest.write("\n")


def ascii_grid_text(grid: Grid) -> str:
    buf = io.StringIO()
    write_ascii_grid(grid, buf)
    return buf.getvalue()


def block_aggregate(grid: Grid, factor: int) -> Grid:
    """Coarsen by averaging the valid cells of each ``factor`` x ``factor`` block.

    Blocks are anchored at the lower-left corner, so the origin is unchanged;
    leftover rows at the top and columns at the right are dropped. A block
    with no valid cells becomes NODATA.
    """
    if int(factor) != factor or factor < 1:
        raise GridError(f"aggregation factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return grid
    nr, nc = grid.n_rows // factor, grid.n_cols // factor
    if nr == 0 or nc == 0:
        raise GridError(f"factor {factor} exceeds grid dimensions {grid.shape}")
    sub = grid.cells[grid.n_rows - nr * factor :, : nc * factor]
    valid = sub != grid.nodata_value
    blocks = np.where(valid, sub, 0.0).reshape(nr, factor, nc, factor)
    counts = valid.reshape(nr, factor, nc, factor).sum(axis=(1, 3))
    sums = blocks.sum(axis=(1, 3))
    out = np.full((nr, nc), grid.nodata_value)
    ok = counts > 0
    out[ok] = sums[ok] / counts[ok]
    return Grid(out, grid.cell_size * factor, grid.origin_easting, grid.origin_northing, grid.nodata_value)


def grid_stats(grid: Grid) -> GridStats:
    """Mean and population SD over the valid cells.

    Values are shifted by the first valid cell before the two-pass sums, so
    the SD of an integer-valued grid is bit-identical under integer shifts.
    """
    vals = grid.cells[grid.valid_mask]
    if vals.size == 0:
        raise GridError("grid has no valid cells")
    ref = vals[0]
    shifted = vals - ref
    m = shifted.mean()
    sd = math.sqrt(np.mean((shifted - m) ** 2))
    return GridStats(mean=float(ref + m), sd=float(sd), valid_count=int(vals.size))


def _ramp_colors(ramp: str | Iterable[tuple[int, int, int]]) -> np.ndarray:
    if isinstance(ramp, str):
        try:
            stops = COLOR_RAMPS[ramp]
        except KeyError:
            raise GridError(f"unknown color ramp {ramp!r}; choose from {sorted(COLOR_RAMPS)}") from None
    else:
        stops = tuple(ramp)
    stops = np.asarray(stops, dtype=np.float64)
    if stops.ndim != 2 or stops.shape[1] != 3 or len(stops) < 2:
        raise GridError("a color ramp needs at least two RGB stops")
    return stops


def colorize(grid: Grid, ramp="viridis") -> np.ndarray:
    """RGBA uint8 image: valid cells mapped linearly from [min, max] onto the ramp.

    NODATA cells are fully transparent. A constant grid maps to the first stop.
    """
    stops = _ramp_colors(ramp)
    valid = grid.valid_mask
    rgba = np.zeros(grid.shape + (4,), dtype=np.uint8)
    if not valid.any():
        return rgba
    vals = grid.cells[valid]
    lo, hi = vals.min(), vals.max()
    t = np.zeros_like(vals) if hi == lo else (vals - lo) / (hi - lo)
    pos = t * (len(stops) - 1)
    idx = np.minimum(pos.astype(np.int64), len(stops) - 2)
    frac = (pos - idx)[:, None]
    rgb = stops[idx] * (1 - frac) + stops[idx + 1] * frac
    rgba[valid, :3] = np.rint(rgb).astype(np.uint8)
    rgba[valid, 3] = 255
    return rgba


def render_png(grid: Grid, out_path: str | Path, ramp="viridis") -> Path:
    """Render ``grid`` to a PNG file. Output bytes depend only on the inputs."""
    from PIL import Image

    out_path = Path(out_path)
    img = Image.fromarray(colorize(grid, ramp), mode="RGBA")
    img.save(out_path, format="PNG", optimize=False)
    return out_path
