"""Standard terrain derivatives and the OLS regression they feed.

All filters work on the 3 x 3 neighbourhood

    a b c
    d e f
    g h i

with ``a`` to the north-west, and return NODATA wherever any of the nine
cells is NODATA or off the grid.

slope      Horn (1981): sqrt(p^2 + q^2) with
           p = ((c + 2f + i) - (a + 2d + g)) / (8 L),
           q = ((a + 2b + c) - (g + 2h + i)) / (8 L); rise over run.
tri        Riley et al. (1999): sqrt(sum over the 8 neighbours of (z_n - e)^2).
roughness  max - min over the 3 x 3 window.
curvature  Zevenbergen & Thorne (1987): 2 (D + E) with
           D = ((d + f)/2 - e) / L^2, E = ((b + h)/2 - e) / L^2.
           This is the Laplacian estimate, positive in a bowl.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .raster import Grid

logger = logging.getLogger(__name__)


def _window(grid: Grid) -> dict[str, np.ndarray]:
    z = np.pad(grid.masked(), 1, constant_values=np.nan)
    r, c = grid.shape
    names = "abcdefghi"
    return {names[3 * di + dj]: z[di : di + r, dj : dj + c] for di in range(3) for dj in range(3)}


def slope(grid: Grid) -> Grid:
    w = _window(grid)
    L = grid.cell_size
    p = ((w["c"] + 2 * w["f"] + w["i"]) - (w["a"] + 2 * w["d"] + w["g"])) / (8 * L)
    q = ((w["a"] + 2 * w["b"] + w["c"]) - (w["g"] + 2 * w["h"] + w["i"])) / (8 * L)
    s = np.sqrt(p * p + q * q)
    return grid.with_cells(np.where(np.isnan(w["e"]), np.nan, s))


def tri(grid: Grid) -> Grid:
    w = _window(grid)
    e = w["e"]
    total = sum((w[k] - e) ** 2 for k in "abcdfghi")
    return grid.with_cells(np.sqrt(total))


def roughness(grid: Grid) -> Grid:
    w = _window(grid)
    stack = np.stack([w[k] for k in "abcdefghi"])
    # max - min is NaN as soon as any window cell is NaN
    return grid.with_cells(stack.max(axis=0) - stack.min(axis=0))


def curvature(grid: Grid) -> Grid:
    w = _window(grid)
    L2 = grid.cell_size**2
    d_term = ((w["d"] + w["f"]) / 2 - w["e"]) / L2
    e_term = ((w["b"] + w["h"]) / 2 - w["e"]) / L2
    curv = 2 * (d_term + e_term)
    corners = w["a"] + w["c"] + w["g"] + w["i"]
    return grid.with_cells(np.where(np.isnan(corners), np.nan, curv))


DERIVATIVES: dict[str, Callable[[Grid], Grid]] = {
    "slope": slope,
    "tri": tri,
    "roughness": roughness,
    "curvature": curvature,
}


def derivative(grid: Grid, name: str) -> Grid:
    try:
        return DERIVATIVES[name](grid)
    except KeyError:
        raise ValueError(f"unknown derivative {name!r}; choose from {sorted(DERIVATIVES)}") from None


# ---------------------------------------------------------------------------
# design matrix and OLS


class RankDeficientError(ValueError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


@dataclass
class DesignMatrix:
    """Intercept plus one column per derivative, sampled at the accepted sites."""

    X: np.ndarray
    columns: list[str]
    site_index: np.ndarray
    excluded: int = 0

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]


def sample_grid(grid: Grid, easting, northing) -> np.ndarray:
    """Value of the cell containing each point; NaN off-grid or on NODATA."""
    row, col = grid.cell_index(easting, northing)
    inside = (row >= 0) & (row < grid.n_rows) & (col >= 0) & (col < grid.n_cols)
    out = np.full(row.shape, np.nan)
    vals = grid.cells[row[inside], col[inside]]
    vals = np.where(vals == grid.nodata_value, np.nan, vals)
    out[inside] = vals
    return out


def build_design_matrix(easting, northing, derivatives: dict[str, Grid]) -> DesignMatrix:
    """Nearest-cell samples of each derivative; sites hitting NODATA are dropped and counted."""
    easting = np.atleast_1d(np.asarray(easting, dtype=float))
    northing = np.atleast_1d(np.asarray(northing, dtype=float))
    names = list(derivatives)
    if len(set(names)) != len(names) or "intercept" in names:
        raise ValueError(f"derivative names must be unique and not 'intercept': {names}")
    cols = [np.ones(easting.shape)] + [sample_grid(g, easting, northing) for g in derivatives.values()]
    X = np.column_stack(cols)
    ok = np.all(np.isfinite(X), axis=1)
    excluded = int((~ok).sum())
    if excluded:
        logger.info("design matrix: %d of %d sites excluded (NODATA derivative)", excluded, len(ok))
    return DesignMatrix(X[ok], ["intercept", *names], np.flatnonzero(ok), excluded)


@dataclass
class OlsFit:
    coefficients: np.ndarray
    columns: list[str]
    residuals: np.ndarray
    r_squared: float
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.columns, self.coefficients.tolist()))


def ols_fit(X, z, columns: Sequence[str] | None = None, rcond: float = 1e-10) -> OlsFit:
    """Least squares via column-pivoted QR.

    Raises:
        RankDeficientError: when X is not of full column rank; names the
            columns the pivoting could not resolve.
    """
    X = np.asarray(X, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n, p = X.shape
    columns = list(columns) if columns is not None else [f"x{j}" for j in range(p)]
    if z.shape != (n,):
        raise ValueError(f"z has shape {z.shape}, expected ({n},)")
    if n <= p:
        raise ValueError(f"need more rows than columns, got {n} x {p}")
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rcond * diag[0])) if diag[0] > 0 else 0
    if rank < p:
        raise RankDeficientError([columns[j] for j in piv[rank:]])
    coef = np.empty(p)
    coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ z)
    resid = z - X @ coef
    ss_tot = float(np.sum((z - z.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else float("nan")
    return OlsFit(coef, columns, resid, r2)


def ols_predict(X, coefficients) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ np.asarray(coefficients, dtype=np.float64)
