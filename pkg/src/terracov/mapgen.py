"""Sliding-window covariate maps and their composition with kriged residuals."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import PREDICT_BATCH, ArchConfig, ModelParameters, predict
from .raster import Grid, GridError, read_ascii_grid, render_png, write_ascii_grid

logger = logging.getLogger(__name__)

# nodes predicted per chunk; bounds patch memory at chunk * k * k doubles
_NODE_CHUNK = 4096


def model_fingerprint(params: ModelParameters, arch: ArchConfig) -> str:
    h = hashlib.sha256(arch.fingerprint().encode())
    for name, t in params.tensors.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    h.update(repr((params.target_mean, params.target_scale)).encode())
    return h.hexdigest()


@dataclass
class CovariateGrid:
    grid: Grid
    provenance: dict = field(default_factory=dict)

    def save(self, directory: str | Path, png: bool = False, name: str = "covariate") -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_ascii_grid(self.grid, d / f"{name}.asc")
        (d / f"{name}.json").write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n")
        if png:
            render_png(self.grid, d / f"{name}.png")
        return d / f"{name}.asc"

    @classmethod
    def load(cls, directory: str | Path, name: str = "covariate") -> CovariateGrid:
        d = Path(directory)
        prov_path = d / f"{name}.json"
        prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
        return cls(read_ascii_grid(d / f"{name}.asc"), prov)


def output_template(grid: Grid, stride: int) -> Grid:
    """Grid whose cell (i, j) stands for source cell (i * stride, j * stride).

    Shares the source grid's north-west corner; cells are ``stride`` times larger.
    """
    rows = math.ceil(grid.n_rows / stride)
    cols = math.ceil(grid.n_cols / stride)
    top = grid.origin_northing + grid.n_rows * grid.cell_size
    size = grid.cell_size * stride
    return Grid(
        np.full((rows, cols), grid.nodata_value), size, grid.origin_easting, top - rows * size, grid.nodata_value
    )


def predict_grid(
    params: ModelParameters,
    arch: ArchConfig,
    grid: Grid,
    national_sd: float,
    stride: int = 1,
    batch_size: int = PREDICT_BATCH,
) -> CovariateGrid:
    """Network prediction at every ``stride``-th cell of ``grid``.

    Each node's patch is extracted and normalised exactly as for training,
    so a node on a training site's cell reproduces that site's evaluation
    prediction. Nodes whose window leaves the grid or touches NODATA are NODATA.
    """
    if int(stride) != stride or stride < 1:
        raise GridError(f"stride must be a positive integer, got {stride}")
    if not national_sd > 0:
        raise ValueError(f"national SD must be positive, got {national_sd}")
    stride = int(stride)
    k = arch.input_size
    half = k // 2
    out = output_template(grid, stride)
    cells = np.full(out.shape, np.nan)
    provenance = {
        "model_fingerprint": model_fingerprint(params, arch),
        "source_grid_fingerprint": grid.fingerprint(),
        "stride": stride,
        "window": k,
        "national_sd": national_sd,
    }
    if grid.n_rows < k or grid.n_cols < k:
        logger.warning("grid %s is smaller than the %d-cell window; map is all NODATA", grid.shape, k)
        return CovariateGrid(out, provenance)

    src_rows = np.arange(0, grid.n_rows, stride)
    src_cols = np.arange(0, grid.n_cols, stride)
    # window top-left corner for a node at (r, c) is (r - half, c - half)
    row_ok = (src_rows - half >= 0) & (src_rows - half + k <= grid.n_rows)
    col_ok = (src_cols - half >= 0) & (src_cols - half + k <= grid.n_cols)
    invalid = (~grid.valid_mask).astype(np.int64)
    bad_windows = sliding_window_view(invalid, (k, k)).sum(axis=(2, 3))
    windows = sliding_window_view(grid.cells, (k, k))

    oi, oj = np.meshgrid(np.flatnonzero(row_ok), np.flatnonzero(col_ok), indexing="ij")
    oi, oj = oi.ravel(), oj.ravel()
    wr, wc = src_rows[oi] - half, src_cols[oj] - half
    keep = bad_windows[wr, wc] == 0
    oi, oj, wr, wc = oi[keep], oj[keep], wr[keep], wc[keep]
    logger.info("predicting %d map nodes", oi.size)
    for s in range(0, oi.size, _NODE_CHUNK):
        raw = windows[wr[s : s + _NODE_CHUNK], wc[s : s + _NODE_CHUNK]]
        patches = (raw - raw[:, half : half + 1, half : half + 1]) / national_sd
        cells[oi[s : s + _NODE_CHUNK], oj[s : s + _NODE_CHUNK]] = predict(params, arch, patches, batch_size)
    return CovariateGrid(out.with_cells(cells), provenance)


def compose_prediction(covariate: Grid | CovariateGrid, residual_field: Grid) -> Grid:
    """Cell-wise covariate + kriged residual; NODATA in either input gives NODATA."""
    cov = covariate.grid if isinstance(covariate, CovariateGrid) else covariate
    if not cov.same_georef(residual_field):
        raise GridError(
            f"georeferencing mismatch: covariate {cov.header()} vs residual {residual_field.header()}"
        )
    total = cov.cells + residual_field.cells
    bad = ~cov.valid_mask | ~residual_field.valid_mask
    total[bad] = np.nan
    return cov.with_cells(total)
