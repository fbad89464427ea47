import math

import numpy as np
import pytest

from hrgat.propagation import (
    CellRecord,
    build_coverage_map,
    coverage_radius_km,
    haversine_km,
    path_loss_db,
    read_cells_csv,
    write_cells_csv,
)
from hrgat.tiles import GeoPoint, TileId, latlon_to_tile, tile_center, tiles_in_bbox, tile_bounds, BBox

# 30-digit evaluations of the COST-231 expression at f=1800 MHz, h_b=30 m, h_m=1.5 m
PL_1KM = 136.196947657317043
DECADE = 35.224855781586211
R_43DBM = 1.560027147627649


def cell(eirp=43.0, lat=45.42, lon=-75.70, h=30.0, f=1800.0, bw=20.0, cid="c"):
    return CellRecord(cid, GeoPoint(lat, lon), eirp, h, f, bw)


def test_path_loss_reference():
    assert path_loss_db(1800, 30, 1.5, 1.0) == pytest.approx(PL_1KM, abs=1e-9)


def test_one_decade_adds_slope():
    diff = path_loss_db(1800, 30, 1.5, 10.0) - path_loss_db(1800, 30, 1.5, 1.0)
    assert diff == pytest.approx(DECADE, abs=1e-9)
    assert diff == pytest.approx(44.9 - 6.55 * math.log10(30), abs=1e-12)


def test_path_loss_increasing_on_grid():
    d = np.linspace(0.02, 20.0, 2000)
    assert np.all(np.diff(path_loss_db(1800, 30, 1.5, d)) > 0)


@pytest.mark.parametrize("args", [(100, 30, 1.5, 1), (2100, 30, 1.5, 1), (1800, 0.5, 1.5, 1),
                                  (1800, 30, 11, 1), (1800, 30, 1.5, 0.01)])
def test_path_loss_rejects_out_of_range(args):
    with pytest.raises(ValueError):
        path_loss_db(*args)


def test_radius_reference():
    r, flag = coverage_radius_km(cell())
    assert r == pytest.approx(R_43DBM, rel=1e-9) and not flag


def test_radius_scales_tenfold_per_slope_term():
    r1, _ = coverage_radius_km(cell(eirp=30.0), clamp=False)
    r2, _ = coverage_radius_km(cell(eirp=30.0), rx_sensitivity_dbm=-100.0 - DECADE, clamp=False)
    assert r2 / r1 == pytest.approx(10.0, rel=1e-9)


def test_radius_clamps():
    assert coverage_radius_km(cell(eirp=100.0)) == (20.0, False)
    r, flag = coverage_radius_km(cell(eirp=-60.0))
    assert r == 0.02 and flag


def test_cell_record_validation():
    with pytest.raises(ValueError):
        cell(h=0.5)
    with pytest.raises(ValueError):
        cell(f=2500)
    with pytest.raises(ValueError):
        cell(bw=0)


def _city_tiles(z=15):
    t = latlon_to_tile(GeoPoint(45.42, -75.70), 13)
    b = tile_bounds(t)
    big = BBox(b.min_lat - 0.05, b.min_lon - 0.07, b.max_lat + 0.05, b.max_lon + 0.07)
    return tiles_in_bbox(big, z)


def test_small_radius_covers_only_own_tile():
    tiles = _city_tiles()
    c = cell(eirp=-40.0)  # clamped to 20 m
    cov = build_coverage_map([c], tiles)
    assert cov.tiles_of["c"] == [latlon_to_tile(c.location, 15)]
    assert cov.clamped == ["c"]


def test_coverage_matches_brute_force_scan():
    tiles = _city_tiles()
    c = cell()
    cov = build_coverage_map([c], tiles)
    expected = set()
    for t in tiles:
        ctr = tile_center(t)
        # scalar haversine written out independently
        p1, p2 = math.radians(c.location.lat), math.radians(ctr.lat)
        h = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(
            math.radians(ctr.lon - c.location.lon) / 2) ** 2
        if 2 * 6371.0 * math.asin(math.sqrt(h)) <= R_43DBM:
            expected.add(t)
    expected.add(latlon_to_tile(c.location, 15))
    assert set(cov.tiles_of["c"]) == expected
    assert len(expected) > 4


def test_transpose_and_monotone_sensitivity():
    rng = np.random.default_rng(4)
    tiles = _city_tiles()
    cells = [cell(eirp=float(e), lat=45.42 + dy, lon=-75.70 + dx, cid=f"c{i}")
             for i, (e, dy, dx) in enumerate(zip(rng.uniform(20, 50, 25), rng.uniform(-0.03, 0.03, 25),
                                                  rng.uniform(-0.04, 0.04, 25)))]
    a = build_coverage_map(cells, tiles, rx_sensitivity_dbm=-95.0)
    b = build_coverage_map(cells, tiles, rx_sensitivity_dbm=-105.0)
    pairs_ab = {(c, t) for c, ts in a.tiles_of.items() for t in ts}
    pairs_ba = {(c, t) for t, cs in a.cells_of.items() for c in cs}
    assert pairs_ab == pairs_ba
    for cid in a.tiles_of:
        assert set(a.tiles_of[cid]) <= set(b.tiles_of[cid])


def test_cell_outside_tiles_is_dropped():
    tiles = _city_tiles()
    cov = build_coverage_map([cell(), cell(lat=10.0, lon=10.0, cid="far")], tiles)
    assert cov.dropped == ["far"] and "far" not in cov.tiles_of


def test_haversine_quarter_meridian():
    assert haversine_km(0.0, 0.0, 90.0, 0.0) == pytest.approx(math.pi / 2 * 6371.0, rel=1e-12)


def test_cells_csv_roundtrip(tmp_path):
    cells = [cell(), cell(eirp=40.5, cid="b", bw=10.0)]
    write_cells_csv(cells, tmp_path / "cells.csv")
    assert read_cells_csv(tmp_path / "cells.csv") == cells
