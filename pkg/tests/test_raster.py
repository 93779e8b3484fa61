import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from oracles import two_pass_sd
from terracov.raster import (
    COLOR_RAMPS,
    Grid,
    GridError,
    GridParseError,
    ascii_grid_text,
    block_aggregate,
    colorize,
    grid_stats,
    read_ascii_grid,
    render_png,
    write_ascii_grid,
)

MINIMAL = "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 500\nNODATA_value -9999\n7.5\n"


def test_read_minimal_grid():
    g = read_ascii_grid(io.StringIO(MINIMAL))
    assert g.shape == (1, 1)
    assert g.cells[0, 0] == 7.5
    assert g.cell_size == 500


def test_too_many_values_is_a_parse_error():
    with pytest.raises(GridParseError, match="line"):
        read_ascii_grid(io.StringIO(MINIMAL.replace("7.5\n", "7.5 7.5\n")))


def test_non_numeric_token_names_its_line():
    text = MINIMAL.replace("7.5", "seven")
    with pytest.raises(GridParseError) as exc:
        read_ascii_grid(io.StringIO(text))
    assert exc.value.line == 7


def test_header_is_case_insensitive_and_unordered():
    text = "NROWS 1\ncellSize 2\nNCOLS 2\nYLLCORNER 5\nxllcorner 3\n1 2\n"
    g = read_ascii_grid(io.StringIO(text))
    assert g.shape == (1, 2)
    assert (g.origin_easting, g.origin_northing) == (3, 5)


@pytest.mark.parametrize("header", ["ncols 1\nnrows 1\n7\n", "ncols x\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n7\n"])
def test_malformed_header(header):
    with pytest.raises(GridParseError):
        read_ascii_grid(io.StringIO(header))


def test_write_single_cell():
    text = ascii_grid_text(Grid([[7.5]], 500))
    assert text.splitlines()[-1] == "7.5"


def test_write_nodata_token_and_row_order():
    g = Grid([[1.0, -9999.0], [3.0, 4.0]], 10)
    lines = ascii_grid_text(g).splitlines()
    assert lines[-2:] == ["1 -9999", "3 4"]


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    cells = rng.normal(size=(7, 5)) * 1e3
    cells[2, 3] = -9999
    g = Grid(cells, 90.0, 1234.5, -77.25)
    write_ascii_grid(g, tmp_path / "g.asc")
    back = read_ascii_grid(tmp_path / "g.asc")
    assert back == g
    write_ascii_grid(back, tmp_path / "h.asc")
    assert (tmp_path / "g.asc").read_bytes() == (tmp_path / "h.asc").read_bytes()


def test_grid_rejects_nan():
    with pytest.raises(GridError):
        Grid([[np.nan]], 1)


def test_cells_are_read_only():
    g = Grid([[1.0]], 1)
    with pytest.raises(ValueError):
        g.cells[0, 0] = 2


def test_cell_index_boundary_floors():
    g = Grid(np.zeros((4, 4)), 10, 100, 200)
    # a point exactly on the boundary between rows belongs to the northern cell
    row, col = g.cell_index(110.0, 220.0)
    assert (int(row), int(col)) == (1, 1)
    row, col = g.cell_index(100.0, 200.0)
    assert (int(row), int(col)) == (3, 0)


def test_aggregate_identity():
    g = Grid(np.arange(6.0).reshape(2, 3), 1)
    assert block_aggregate(g, 1) == g


def test_aggregate_mean_of_block():
    out = block_aggregate(Grid([[1.0, 2.0], [3.0, 4.0]], 90), 2)
    assert out.cells[0, 0] == 2.5
    assert out.cell_size == 180


def test_aggregate_ignores_nodata():
    out = block_aggregate(Grid([[1.0, -9999.0], [3.0, -9999.0]], 1), 2)
    assert out.cells[0, 0] == 2.0


def test_aggregate_all_nodata_block():
    out = block_aggregate(Grid([[-9999.0, -9999.0, 1.0, 1.0]] * 2, 1), 2)
    assert_array_equal(out.cells, [[-9999.0, 1.0]])


def test_aggregate_floors_dims_and_keeps_origin():
    g = Grid(np.ones((5, 7)), 1, 10, 20)
    out = block_aggregate(g, 2)
    assert out.shape == (2, 3)
    assert (out.origin_easting, out.origin_northing) == (10, 20)


def test_aggregate_rejects_zero():
    with pytest.raises(GridError):
        block_aggregate(Grid([[1.0]], 1), 0)


def test_aggregate_preserves_grand_mean():
    rng = np.random.default_rng(0)
    g = Grid(rng.normal(size=(12, 18)), 1)
    assert_allclose(block_aggregate(g, 3).cells.mean(), g.cells.mean(), rtol=1e-12)


def test_stats_constant():
    s = grid_stats(Grid(np.full((3, 3), 5.0), 1))
    assert (s.mean, s.sd, s.valid_count) == (5.0, 0.0, 9)


def test_stats_population_sd():
    s = grid_stats(Grid([[0.0, 2.0]], 1))
    assert (s.mean, s.sd) == (1.0, 1.0)


def test_stats_match_two_pass_oracle():
    rng = np.random.default_rng(11)
    cells = rng.normal(50, 20, size=(100, 100))
    s = grid_stats(Grid(cells, 1))
    assert_allclose(s.sd, two_pass_sd(cells.ravel().tolist()), rtol=1e-12)


def test_stats_skip_nodata():
    s = grid_stats(Grid([[0.0, -9999.0, 2.0]], 1))
    assert s.valid_count == 2 and s.mean == 1.0


def test_stats_all_nodata():
    with pytest.raises(GridError):
        grid_stats(Grid([[-9999.0]], 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.1, 100))
def test_stats_sd_shift_invariant_and_scales(shift, scale):
    rng = np.random.default_rng(1)
    # elevations stay clear of the -9999 NODATA sentinel
    cells = np.round(rng.normal(500, 50, size=(9, 9)))
    base = grid_stats(Grid(cells, 1)).sd
    assert grid_stats(Grid(cells + shift, 1)).sd == base
    assert_allclose(grid_stats(Grid(cells * scale, 1)).sd, base * scale, rtol=1e-12)


def test_colorize_constant_grid_is_one_color():
    rgba = colorize(Grid(np.full((4, 4), 3.0), 1))
    assert len(np.unique(rgba.reshape(-1, 4), axis=0)) == 1


def test_colorize_endpoints_hit_ramp_ends():
    rgba = colorize(Grid([[0.0, 5.0, 10.0]], 1))
    assert_array_equal(rgba[0, 0, :3], COLOR_RAMPS["viridis"][0])
    assert_array_equal(rgba[0, 2, :3], COLOR_RAMPS["viridis"][-1])


def test_colorize_nodata_transparent():
    rgba = colorize(Grid([[0.0, -9999.0]], 1))
    assert rgba[0, 1, 3] == 0 and rgba[0, 0, 3] == 255


def test_render_png_is_deterministic(tmp_path):
    g = Grid(np.random.default_rng(0).normal(size=(16, 16)), 1)
    render_png(g, tmp_path / "a.png")
    render_png(g, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_render_png_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        render_png(Grid([[1.0]], 1), tmp_path / "missing" / "x.png")
