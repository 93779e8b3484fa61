"""Synthetic terrain and target worlds with known ground truth.

Terrain is fractional-Brownian-like: i.i.d. complex Gaussian Fourier
coefficients with amplitude |f|^-(H + 1), inverse transformed and
mean-subtracted. Targets are a deterministic function of the terrain around
each site plus Gaussian noise, so the best achievable R^2 is known:
``Var(f) / (Var(f) + noise_sd^2)``.

Target rules (each term z-scored over the drawn sites):

``tri_nonlinear``  log(1 + mean TRI over the ``tri_window`` x ``tri_window``
                   cells centred on the site). The neighbourhood mean is
                   invisible to any single-cell derivative and the log makes
                   it nonlinear, so OLS on standard derivatives falls short.
``slope_linear``   Horn slope of the site cell.
``mixture``        0.6 * tri_nonlinear + 0.4 * (z-scored curvature)^2.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import baselines
from .dataset import Site, write_sites_csv
from .raster import Grid, write_ascii_grid
from .rng import substream

RULES = ("tri_nonlinear", "slope_linear", "mixture")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthRecipe:
    """Everything needed to regenerate a synthetic world.

    The defaults are the demo recipe: noise_sd 0.42 puts the R^2 ceiling
    at 1 / (1 + 0.42^2) ~= 0.85.
    """

    size: int = 512
    hurst: float = 0.7
    rule: str = "tri_nonlinear"
    noise_sd: float = 0.42
    n_sites: int = 5000
    seed: int = 1
    relief_sd: float = 100.0
    base_elevation: float = 200.0
    cell_size: float = 500.0
    quantum: float = 1 / 16
    window: int = 32
    tri_window: int = 5

    def __post_init__(self):
        if not 0 < self.hurst < 1:
            raise SynthError(f"Hurst exponent must lie in (0, 1), got {self.hurst}")
        if self.rule not in RULES:
            raise SynthError(f"unknown target rule {self.rule!r}; choose from {RULES}")
        if self.n_sites < 10:
            raise SynthError(f"need at least 10 sites, got {self.n_sites}")
        if self.noise_sd < 0:
            raise SynthError("noise_sd must be non-negative")
        if self.tri_window < 1 or self.tri_window % 2 == 0:
            raise SynthError("tri_window must be a positive odd number")
        if self.quantum <= 0 or math.log2(self.quantum) != int(math.log2(self.quantum)):
            raise SynthError("quantum must be a power of two so shifted elevations stay exact")

    def to_dict(self) -> dict:
        return asdict(self)


def fractal_terrain(size: int, hurst: float, seed: int, sd: float = 1.0, cell_size: float = 500.0) -> Grid:
    """Spectral-synthesis terrain of shape (size, size), mean 0 and SD ``sd``."""
    if size < 2 or size & (size - 1):
        raise SynthError(f"terrain size must be a power of two, got {size}")
    if not 0 < hurst < 1:
        raise SynthError(f"Hurst exponent must lie in (0, 1), got {hurst}")
    rng = substream(seed, "synth", "terrain")
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    freq = np.hypot(fy, fx)
    freq[0, 0] = 1.0
    amp = freq ** -(hurst + 1.0)
    amp[0, 0] = 0.0
    shape = amp.shape
    coeffs = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * amp
    z = np.fft.irfft2(coeffs, s=(size, size))
    z *= sd / z.std()
    z -= z.mean()
    return Grid(z, cell_size)


def world_dem(recipe: SynthRecipe) -> Grid:
    """Terrain lifted to ``base_elevation`` and rounded to multiples of ``quantum``.

    The dyadic quantum keeps every elevation exactly representable, so adding
    a whole-metre constant to the DEM is exact arithmetic.
    """
    t = fractal_terrain(recipe.size, recipe.hurst, recipe.seed, recipe.relief_sd, recipe.cell_size)
    cells = np.round((t.cells + recipe.base_elevation) / recipe.quantum) * recipe.quantum
    return Grid(cells, recipe.cell_size)


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def truth_function(recipe: SynthRecipe, dem: Grid, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Noise-free target at the given cells under ``recipe.rule``."""

    def tri_term():
        tri = baselines.tri(dem).masked()
        h = recipe.tri_window // 2
        local = sliding_window_view(tri, (recipe.tri_window,) * 2)[rows - h, cols - h].mean(axis=(1, 2))
        return _zscore(np.log1p(local))

    if recipe.rule == "tri_nonlinear":
        f = tri_term()
    elif recipe.rule == "slope_linear":
        f = _zscore(baselines.slope(dem).masked()[rows, cols])
    else:
        curv = _zscore(baselines.curvature(dem).masked()[rows, cols])
        f = 0.6 * tri_term() + 0.4 * curv**2
    if not np.all(np.isfinite(f)):
        raise SynthError("target rule hit NODATA; sites are too close to the edge")
    return f


@dataclass
class SynthSites:
    sites: list[Site]
    rows: np.ndarray
    cols: np.ndarray
    truth: np.ndarray
    targets: np.ndarray
    r2_ceiling: float
    """Var(f) / (Var(f) + noise variance), from the drawn truth values."""

    @property
    def empirical_r2(self) -> float:
        """R^2 of the noiseless truth as a predictor of the noisy targets."""
        ss_tot = np.sum((self.targets - self.targets.mean()) ** 2)
        return float(1 - np.sum((self.targets - self.truth) ** 2) / ss_tot)


def generate_sites(recipe: SynthRecipe, dem: Grid) -> SynthSites:
    """Uniform random sites whose full ``window`` patch and stencils fit inside ``dem``."""
    k = recipe.window
    half = k // 2
    stencil = recipe.tri_window // 2 + 1
    lo = max(half, stencil)
    hi_r = min(dem.n_rows - k + half, dem.n_rows - 1 - stencil)
    hi_c = min(dem.n_cols - k + half, dem.n_cols - 1 - stencil)
    if hi_r < lo or hi_c < lo:
        raise SynthError(f"a {k}-cell margin leaves no interior in a {dem.shape} grid")
    rng = substream(recipe.seed, "synth", "sites")
    rows = rng.integers(lo, hi_r + 1, size=recipe.n_sites)
    cols = rng.integers(lo, hi_c + 1, size=recipe.n_sites)
    # stay clear of cell edges so coordinates map back to the same cell
    du = rng.uniform(0.05, 0.95, size=recipe.n_sites)
    dv = rng.uniform(0.05, 0.95, size=recipe.n_sites)
    east = dem.origin_easting + (cols + du) * dem.cell_size
    north = dem.origin_northing + (dem.n_rows - 1 - rows + dv) * dem.cell_size

    f = truth_function(recipe, dem, rows, cols)
    noise = substream(recipe.seed, "synth", "noise").normal(0.0, recipe.noise_sd, size=recipe.n_sites)
    y = f + noise
    sites = [
        Site(float(e), float(n), float(v), site_id=str(i + 1))
        for i, (e, n, v) in enumerate(zip(east.tolist(), north.tolist(), y.tolist()))
    ]
    var_f = float(f.var())
    denom = var_f + recipe.noise_sd**2
    return SynthSites(sites, rows, cols, f, y, var_f / denom if denom > 0 else 1.0)


def write_world(recipe: SynthRecipe, directory: str | Path) -> dict:
    """Generate a world and write dem.asc, sites.csv, truth.csv and synth.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dem = world_dem(recipe)
    ss = generate_sites(recipe, dem)
    write_ascii_grid(dem, d / "dem.asc")
    write_sites_csv(ss.sites, d / "sites.csv")
    with open(d / "truth.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("site_id,easting,northing,truth,target\n")
        for s, f, y in zip(ss.sites, ss.truth.tolist(), ss.targets.tolist()):
            fh.write(f"{s.site_id},{s.easting!r},{s.northing!r},{f!r},{y!r}\n")
    info = {
        "recipe": recipe.to_dict(),
        "r2_ceiling": ss.r2_ceiling,
        "empirical_r2_of_truth": ss.empirical_r2,
        "truth_variance": float(ss.truth.var()),
    }
    (d / "synth.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info
