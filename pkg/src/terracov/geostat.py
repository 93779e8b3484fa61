"""Residual spatial model: Matheron variogram, exponential fit, ordinary kriging.

Semivariogram family::

    gamma(h) = c0 + c1 * (1 - exp(-h / a))   for h > 0,   gamma(0) = 0

with nugget ``c0``, partial sill ``c1`` and range parameter ``a``.
Distances are planar Euclidean in projected metres.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.spatial.distance import cdist, pdist

from .raster import Grid

logger = logging.getLogger(__name__)


class KrigingError(ValueError):
    pass


def residuals(targets, covariate) -> np.ndarray:
    """z - d: the part of the target left for the spatial and noise terms. Not recentred."""
    targets = np.asarray(targets, dtype=np.float64)
    covariate = np.asarray(covariate, dtype=np.float64)
    if targets.shape != covariate.shape:
        raise ValueError(f"shape mismatch: {targets.shape} vs {covariate.shape}")
    return targets - covariate


@dataclass
class EmpiricalVariogram:
    bin_centers: np.ndarray
    gamma: np.ndarray
    pairs: np.ndarray
    bin_width: float
    max_lag: float

    @property
    def nonempty(self) -> np.ndarray:
        return self.pairs > 0

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lag", "gamma", "pairs"])
            for h, g, n in zip(self.bin_centers.tolist(), self.gamma.tolist(), self.pairs.tolist()):
                w.writerow([repr(h), "" if n == 0 else repr(g), n])


def empirical_variogram(coords, values, bin_width: float, max_lag: float) -> EmpiricalVariogram:
    """Matheron estimator: gamma(h) = sum (r_i - r_j)^2 / (2 N(h)) over unordered pairs.

    Pairs at distance d fall in bin ``floor(d / bin_width)``; only ``d <= max_lag``
    count. Empty bins have ``pairs == 0`` and gamma NaN.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64)
    if len(coords) < 2 or len(coords) != len(values):
        raise ValueError("need at least two sites with one value each")
    if not bin_width > 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    if not max_lag > 0:
        raise ValueError(f"max_lag must be positive, got {max_lag}")
    n_bins = int(math.ceil(max_lag / bin_width))
    dist = pdist(coords)
    sq = pdist(values[:, None], "sqeuclidean")
    keep = dist <= max_lag
    bins = np.minimum((dist[keep] / bin_width).astype(np.int64), n_bins - 1)
    pairs = np.bincount(bins, minlength=n_bins)
    sums = np.bincount(bins, weights=sq[keep], minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(pairs > 0, sums / (2.0 * pairs), np.nan)
    centers = (np.arange(n_bins) + 0.5) * bin_width
    return EmpiricalVariogram(centers, gamma, pairs, float(bin_width), float(max_lag))


@dataclass(frozen=True)
class VariogramModel:
    nugget: float
    partial_sill: float
    range: float
    family: str = "exponential"

    def __post_init__(self):
        if self.nugget < 0 or self.partial_sill < 0 or not self.range > 0:
            raise ValueError(f"invalid variogram parameters {self}")
        if self.family != "exponential":
            raise ValueError(f"unsupported variogram family {self.family!r}")

    @property
    def sill(self) -> float:
        return self.nugget + self.partial_sill

    def __call__(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        g = self.nugget + self.partial_sill * -np.expm1(-h / self.range)
        return np.where(h > 0, g, 0.0)

    def to_dict(self) -> dict:
        return {"family": self.family, "nugget": self.nugget, "partial_sill": self.partial_sill, "range": self.range}


def _exp_basis(h, a):
    return -np.expm1(-h / a)


def fit_exponential(
    variogram: EmpiricalVariogram,
    init_range: float | None = None,
    range_bounds: tuple[float, float] | None = None,
) -> VariogramModel:
    """Pair-count weighted least-squares fit of the exponential model.

    For a fixed range the model is linear in (c0, c1), so those are solved
    exactly by non-negative least squares and only the range is searched
    (bounded scalar minimisation on log range). ``init_range`` brackets the
    default search interval and is the range of a degenerate nugget-only fit.
    """
    ok = variogram.nonempty
    if ok.sum() < 3:
        raise ValueError(f"need at least 3 non-empty bins, got {int(ok.sum())}")
    h = variogram.bin_centers[ok]
    g = variogram.gamma[ok]
    w = np.sqrt(variogram.pairs[ok].astype(np.float64))
    default_a = init_range if init_range is not None else variogram.max_lag / 3
    if np.all(g == 0):
        return VariogramModel(0.0, 0.0, default_a)
    lo, hi = range_bounds if range_bounds is not None else (variogram.bin_width / 100, variogram.max_lag * 100)

    def solve(a):
        A = np.column_stack([np.ones_like(h), _exp_basis(h, a)]) * w[:, None]
        coef, rnorm = scipy.optimize.nnls(A, g * w)
        return coef, rnorm

    def objective(log_a):
        return solve(math.exp(log_a))[1] ** 2

    # coarse scan, then Brent refinement inside the best bracket
    grid = np.linspace(math.log(lo), math.log(hi), 121)
    vals = np.array([objective(x) for x in grid])
    i = int(np.argmin(vals))
    left, right = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = scipy.optimize.minimize_scalar(
        objective, bounds=(left, right), method="bounded", options={"xatol": 1e-12, "maxiter": 500}
    )
    log_a = res.x if res.fun <= vals[i] else grid[i]
    a = math.exp(log_a)
    (c0, c1), _ = solve(a)
    if c1 == 0:
        a = default_a
    return VariogramModel(float(c0), float(c1), float(a))


@dataclass
class KrigingResult:
    mean: np.ndarray
    variance: np.ndarray | None = None
    weights: np.ndarray | None = None
    lagrange: np.ndarray | None = None


def _duplicate_groups(coords: np.ndarray) -> list[list[int]]:
    _, inverse, counts = np.unique(coords, axis=0, return_inverse=True, return_counts=True)
    return [np.flatnonzero(inverse.reshape(-1) == g).tolist() for g in np.flatnonzero(counts > 1)]


def kriging_matrix(coords: np.ndarray, model: VariogramModel) -> np.ndarray:
    """Ordinary kriging LHS in semivariogram form, bordered by the unbiasedness row.

    Co-located but distinct sites get gamma = c0 (nugget as measurement error).
    """
    n = len(coords)
    A = np.zeros((n + 1, n + 1))
    d = cdist(coords, coords)
    G = model.nugget + model.partial_sill * -np.expm1(-d / model.range)
    np.fill_diagonal(G, 0.0)
    A[:n, :n] = G
    A[:n, n] = 1.0
    A[n, :n] = 1.0
    return A


def ordinary_krige(
    coords,
    values,
    model: VariogramModel,
    queries,
    return_variance: bool = True,
    return_weights: bool = False,
    chunk: int = 2048,
) -> KrigingResult:
    """Global-neighbourhood ordinary kriging at ``queries``.

    Solves ``[G 1; 1' 0] [w; mu] = [g0; 1]`` per query, where ``g0`` holds
    the semivariances between the query and each site (0 at zero distance,
    so queries on a site reproduce its value). The prediction is ``w' r``
    and the kriging variance ``w' g0 + mu``, clamped at 0 with a warning
    when round-off drives it negative.

    Raises:
        KrigingError: if the system is singular, e.g. duplicated sites with
            zero nugget; the duplicate site indices are named.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    n = len(coords)
    if n < 1 or len(values) != n:
        raise KrigingError("need at least one site with one value each")
    if model.nugget == 0:
        dups = _duplicate_groups(coords)
        if dups:
            raise KrigingError(f"singular kriging system: duplicate sites {dups} with zero nugget")
    A = kriging_matrix(coords, model)
    try:
        lu = scipy.linalg.lu_factor(A, check_finite=True)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise KrigingError(f"singular kriging system: {exc}") from None
    if np.any(np.diag(lu[0]) == 0):
        raise KrigingError(f"singular kriging system (duplicates: {_duplicate_groups(coords)})")

    m = len(queries)
    mean = np.empty(m)
    var = np.empty(m) if return_variance else None
    weights = np.empty((m, n)) if return_weights else None
    lagr = np.empty(m) if (return_weights or return_variance) else None

    if not (return_variance or return_weights):
        # dual form: one solve, then each prediction is a dot product
        dual = scipy.linalg.lu_solve(lu, np.append(values, 0.0))
        for s in range(0, m, chunk):
            g0 = model(cdist(queries[s : s + chunk], coords))
            mean[s : s + chunk] = g0 @ dual[:n] + dual[n]
        return KrigingResult(mean)

    for s in range(0, m, chunk):
        g0 = model(cdist(queries[s : s + chunk], coords))
        rhs = np.vstack([g0.T, np.ones((1, g0.shape[0]))])
        sol = scipy.linalg.lu_solve(lu, rhs)
        w = sol[:n].T
        mu = sol[n]
        mean[s : s + chunk] = w @ values
        lagr[s : s + chunk] = mu
        if return_weights:
            weights[s : s + chunk] = w
        if return_variance:
            var[s : s + chunk] = np.einsum("ij,ij->i", w, g0) + mu
    if return_variance:
        neg = var < 0
        if neg.any():
            warnings.warn(
                f"clamped {int(neg.sum())} negative kriging variances (min {var[neg].min():.3g}) to 0",
                RuntimeWarning,
            )
            var[neg] = 0.0
    return KrigingResult(mean, var, weights, lagr)


def grid_nodes(template: Grid) -> np.ndarray:
    """Cell-centre coordinates of every node, row-major from the northernmost row."""
    rows, cols = np.indices(template.shape)
    e, n = template.cell_center(rows.ravel(), cols.ravel())
    return np.column_stack([e, n])


def krige_residual_grid(
    coords,
    values,
    model: VariogramModel,
    template: Grid,
    with_variance: bool = False,
) -> Grid | tuple[Grid, Grid]:
    """Kriged residual at every cell centre of ``template`` (its georeferencing is reused)."""
    nodes = grid_nodes(template)
    res = ordinary_krige(coords, values, model, nodes, return_variance=with_variance)
    mean = template.with_cells(res.mean.reshape(template.shape))
    if with_variance:
        return mean, template.with_cells(res.variance.reshape(template.shape))
    return mean
