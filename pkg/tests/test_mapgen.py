import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from terracov.dataset import Site, assemble_dataset
from terracov.evaluation import fold_predictions
from terracov.mapgen import CovariateGrid, compose_prediction, output_template, predict_grid
from terracov.network import ArchConfig, ConvSpec, DenseSpec, build_network, predict
from terracov.raster import Grid, GridError
from terracov.training import FoldAssignment

K = 8


def small_arch():
    return ArchConfig(K, (ConvSpec(4, stride=2, noise_sigma=0.3, dropout_rate=0.2),), 2, (DenseSpec(6, 0.2),), seed=3)


def terrain(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return Grid(np.round(rng.normal(200, 25, size=(n, n)) * 16) / 16, 30.0, 1000.0, 2000.0)


@pytest.fixture(scope="module")
def model():
    arch = small_arch()
    params = build_network(arch)
    params.target_mean, params.target_scale = 1.5, 0.7
    return params, arch


def test_constant_grid_gives_constant_interior(model):
    params, arch = model
    g = Grid(np.full((20, 20), 55.0), 10.0)
    out = predict_grid(params, arch, g, national_sd=3.0).grid
    expected = predict(params, arch, np.zeros((1, K, K)))[0]
    inner = out.cells[K // 2 : 20 - K // 2 + 1, K // 2 : 20 - K // 2 + 1]
    assert_array_equal(inner, expected)


def test_border_band_is_nodata(model):
    params, arch = model
    out = predict_grid(params, arch, terrain(), 25.0).grid
    valid = out.valid_mask
    half = K // 2
    assert not valid[:half].any() and not valid[:, :half].any()
    # window rows r - half .. r + half - 1 must fit, so the last half - 1 rows are NODATA
    assert not valid[40 - half + 1 :].any() and not valid[:, 40 - half + 1 :].any()
    assert valid[half : 40 - half + 1, half : 40 - half + 1].all()


def test_nodata_cell_blanks_covering_windows(model):
    params, arch = model
    g = terrain()
    cells = g.cells.copy()
    cells[20, 20] = g.nodata_value
    out = predict_grid(params, arch, g.with_cells(cells), 25.0).grid
    assert not out.valid_mask[17:25, 17:25].any()
    assert out.valid_mask[16, 16] and out.valid_mask[25, 25]


def test_training_site_matches_eval_prediction(model):
    params, arch = model
    g = terrain()
    sites = []
    for i, (r, c) in enumerate([(10, 10), (15, 22), (30, 8), (20, 33), (25, 25), (12, 30)]):
        e, n = g.cell_center(r, c)
        sites.append(Site(float(e), float(n), float(i), site_id=f"{r}-{c}"))
    ds, _ = assemble_dataset(g, sites, k=K, k_folds=2, seed=1)
    mp = predict_grid(params, arch, g, ds.national_sd).grid
    for fold in (0, 1):
        idx, pred, _ = fold_predictions(params, arch, ds, FoldAssignment(2, fold, 0))
        for i, p in zip(idx, pred):
            r, c = map(int, ds.sites[i].site_id.split("-"))
            assert mp.cells[r, c] == p


def test_stride_subsamples_full_map(model):
    params, arch = model
    g = terrain()
    full = predict_grid(params, arch, g, 25.0).grid
    sub = predict_grid(params, arch, g, 25.0, stride=3).grid
    assert sub.shape == (14, 14) and sub.cell_size == 90.0
    assert_array_equal(sub.cells, full.cells[::3, ::3])


def test_stride_template_keeps_north_west_corner():
    g = terrain()
    t = output_template(g, 3)
    top = g.origin_northing + g.n_rows * g.cell_size
    assert t.origin_easting == g.origin_easting
    assert t.origin_northing + t.n_rows * t.cell_size == top
    assert_allclose(t.cell_center(2, 5)[0] - t.cell_size / 2, g.cell_center(6, 15)[0] - g.cell_size / 2)


def test_bad_stride(model):
    params, arch = model
    with pytest.raises(GridError):
        predict_grid(params, arch, terrain(), 25.0, stride=0)


def test_elevation_offset_leaves_map_unchanged(model):
    params, arch = model
    g = terrain()
    a = predict_grid(params, arch, g, 25.0).grid
    b = predict_grid(params, arch, g.with_cells(g.cells + 1000.0), 25.0).grid
    assert_array_equal(a.cells, b.cells)


def test_grid_smaller_than_window(model):
    params, arch = model
    out = predict_grid(params, arch, Grid(np.zeros((5, 5)), 1.0), 1.0).grid
    assert not out.valid_mask.any()


def test_provenance_and_round_trip(model, tmp_path):
    params, arch = model
    cov = predict_grid(params, arch, terrain(), 25.0, stride=2)
    assert cov.provenance["stride"] == 2 and len(cov.provenance["model_fingerprint"]) == 64
    cov.save(tmp_path, png=True)
    back = CovariateGrid.load(tmp_path)
    assert back.provenance == cov.provenance
    assert (tmp_path / "covariate.png").exists()


def test_compose_with_zero_residual_is_covariate(model):
    params, arch = model
    cov = predict_grid(params, arch, terrain(), 25.0).grid
    total = compose_prediction(cov, cov.with_cells(np.zeros(cov.shape)))
    assert_array_equal(total.cells, cov.cells)


def test_compose_matches_cell_loop():
    rng = np.random.default_rng(1)
    cov = Grid(rng.normal(size=(5, 6)), 10.0)
    cells = cov.cells.copy()
    cells[1, 2] = cov.nodata_value
    cov = cov.with_cells(cells)
    res = cov.with_cells(rng.normal(size=(5, 6)))
    total = compose_prediction(cov, res)
    for r in range(5):
        for c in range(6):
            if (r, c) == (1, 2):
                assert total.cells[r, c] == cov.nodata_value
            else:
                assert total.cells[r, c] == cov.cells[r, c] + res.cells[r, c]


def test_compose_rejects_georef_mismatch():
    a = Grid(np.zeros((4, 4)), 10.0)
    with pytest.raises(GridError, match="georeferencing"):
        compose_prediction(a, Grid(np.zeros((4, 4)), 10.0, origin_easting=5.0))
