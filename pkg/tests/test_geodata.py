import math

import numpy as np
import pytest

from hrgat.geodata import (
    EARTH_RADIUS_M,
    FeatureSource,
    FeatureTable,
    PointFeatureSet,
    PolygonFeatureSet,
    aggregate_points,
    aggregate_polygons,
    build_feature_table,
    normalize,
    points_from_geojson,
    points_to_geojson,
    polygons_from_geojson,
    polygons_to_geojson,
    read_feature_csv,
    write_feature_csv,
)
from hrgat.tiles import BBox, TileId, children, tile_bounds, tiles_in_bbox

T = TileId(2373, 2933, 13)
B = tile_bounds(T)


def square(lat0, lon0, lat1, lon1):
    return [np.array([[lat0, lon0], [lat0, lon1], [lat1, lon1], [lat1, lon0], [lat0, lon0]])]


def shoelace_m2(ring, ref_lat):
    # independent planar area on the equirectangular plane
    y = np.radians(ring[:, 0]) * EARTH_RADIUS_M
    x = np.radians(ring[:, 1]) * EARTH_RADIUS_M * math.cos(math.radians(ref_lat))
    x, y = x - x[0], y - y[0]  # avoid cancellation at large coordinates
    return 0.5 * abs(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def test_points_in_one_tile():
    lat = B.min_lat + (B.max_lat - B.min_lat) * np.array([0.2, 0.5, 0.7])
    lon = B.min_lon + (B.max_lon - B.min_lon) * np.array([0.3, 0.4, 0.9])
    col = aggregate_points(PointFeatureSet("p", lat, lon), [T, TileId(2374, 2933, 13)])
    assert col.tolist() == [3.0, 0.0]


def test_no_points_gives_zero_column():
    col = aggregate_points(PointFeatureSet("p", [], []), children(T))
    assert col.tolist() == [0.0] * 4


def test_point_conservation_over_block():
    rng = np.random.default_rng(0)
    kids = children(T)
    lat = rng.uniform(B.min_lat + 1e-9, B.max_lat - 1e-9, 100)
    lon = rng.uniform(B.min_lon + 1e-9, B.max_lon - 1e-9, 100)
    assert aggregate_points(PointFeatureSet("p", lat, lon), kids).sum() == 100


def test_points_outside_counted_in_diagnostics():
    diag = {}
    pf = PointFeatureSet("stops", [B.max_lat + 1.0, B.min_lat + 1e-6], [B.min_lon + 1e-6] * 2)
    col = aggregate_points(pf, [T], diagnostics=diag)
    assert col.tolist() == [1.0] and diag == {"stops": 1}


def test_weighted_points_sum():
    pf = PointFeatureSet("roads", [B.min_lat + 1e-5] * 2, [B.min_lon + 1e-5] * 2, [0.25, 1.5])
    assert aggregate_points(pf, [T]).tolist() == [1.75]
    assert aggregate_points(pf, [T], use_weights=False).tolist() == [2.0]


def test_empty_tile_list_rejected():
    with pytest.raises(ValueError):
        aggregate_points(PointFeatureSet("p", [0.0], [0.0]), [])


def test_polygon_inside_tile_metric():
    dl, do = B.max_lat - B.min_lat, B.max_lon - B.min_lon
    poly = square(B.min_lat + 0.2 * dl, B.min_lon + 0.2 * do, B.min_lat + 0.6 * dl, B.min_lon + 0.5 * do)
    pf = PolygonFeatureSet("pop", [poly], [500.0])
    assert aggregate_polygons(pf, [T], "metric").tolist() == pytest.approx([500.0], rel=1e-12)
    assert aggregate_polygons(pf, [T], "count").tolist() == [1.0]


def test_polygon_straddling_two_tiles_splits_evenly():
    right = TileId(T.x + 1, T.y, 13)
    edge = B.max_lon
    w = 0.3 * (B.max_lon - B.min_lon)
    lat0, lat1 = B.min_lat + 0.1 * (B.max_lat - B.min_lat), B.min_lat + 0.4 * (B.max_lat - B.min_lat)
    pf = PolygonFeatureSet("pop", [square(lat0, edge - w, lat1, edge + w)], [500.0])
    col = aggregate_polygons(pf, [T, right], "metric")
    assert col == pytest.approx([250.0, 250.0], rel=1e-9)


def test_area_mode_matches_shoelace():
    dl, do = B.max_lat - B.min_lat, B.max_lon - B.min_lon
    ring = square(B.min_lat + 0.1 * dl, B.min_lon + 0.1 * do, B.min_lat + 0.3 * dl, B.min_lon + 0.35 * do)
    ref = 0.5 * (B.min_lat + B.max_lat)
    col = aggregate_polygons(PolygonFeatureSet("b", [ring]), [T], "area", ref_lat=ref)
    assert col[0] == pytest.approx(shoelace_m2(ring[0], ref), rel=1e-9)


def test_metric_conservation_random_polygons():
    rng = np.random.default_rng(1)
    dl, do = B.max_lat - B.min_lat, B.max_lon - B.min_lon
    polys, metrics = [], []
    for _ in range(60):
        a, b = sorted(rng.uniform(0.01, 0.99, 2))
        c, d = sorted(rng.uniform(0.01, 0.99, 2))
        polys.append(square(B.min_lat + a * dl, B.min_lon + c * do, B.min_lat + b * dl, B.min_lon + d * do))
        metrics.append(rng.uniform(1, 1000))
    pf = PolygonFeatureSet("m", polys, metrics)
    kids = [g for k in children(T) for g in children(k)]
    col = aggregate_polygons(pf, kids, "metric")
    assert col.sum() == pytest.approx(sum(metrics), rel=1e-9)


def test_metric_mode_needs_values():
    pf = PolygonFeatureSet("m", [square(B.min_lat, B.min_lon, B.max_lat, B.max_lon)])
    with pytest.raises(ValueError):
        aggregate_polygons(pf, [T], "metric")


def test_open_ring_rejected():
    with pytest.raises(ValueError):
        PolygonFeatureSet("m", [[np.array([[0, 0], [0, 1], [1, 1], [1, 0]])]])


def test_build_feature_table_shapes_and_collision():
    eps = 1e-7
    bbox = BBox(B.min_lat + eps, B.min_lon + eps, B.max_lat - eps, B.max_lon - eps)
    pts = PointFeatureSet("p", [B.min_lat + 1e-4], [B.min_lon + 1e-4])
    src = [FeatureSource("a", pts, "count"), FeatureSource("b", pts, "sum")]
    tabs = build_feature_table(src, bbox)
    assert sorted(tabs) == [13, 14, 15]
    assert [len(tabs[z].tiles) for z in (13, 14, 15)] == [1, 4, 16]
    assert all(tabs[z].feature_names == ["a", "b"] for z in tabs)
    assert tabs[15].column("a").sum() == 1.0
    with pytest.raises(ValueError, match="collision"):
        build_feature_table([FeatureSource("a", pts), FeatureSource("a", pts)], bbox)


def test_normalize_two_point_and_constant_column():
    ft = FeatureTable(children(T)[:2], np.array([[0.0, 5.0], [2.0, 5.0]]), ["x", "c"])
    out = normalize(ft, [0, 1])
    assert out.features[:, 0].tolist() == [-1.0, 1.0]
    assert out.features[:, 1].tolist() == [0.0, 0.0]


def test_normalize_uses_train_rows_only():
    ft = FeatureTable(children(T)[:3], np.array([[0.0], [2.0], [1000.0]]), ["x"])
    out = normalize(ft, [0, 1])
    assert out.norm_stats["mean"].tolist() == [1.0]
    assert out.features[2, 0] == pytest.approx(999.0)


def test_geojson_roundtrip():
    pts = PointFeatureSet("p", [45.1, 45.2], [-75.1, -75.2], [1.0, 2.0])
    back = points_from_geojson("p", points_to_geojson(pts))
    assert np.array_equal(back.lats, pts.lats) and np.array_equal(back.weights, pts.weights)
    polys = PolygonFeatureSet("q", [square(45.0, -75.0, 45.01, -74.99)], [7.0])
    pb = polygons_from_geojson("q", polygons_to_geojson(polys))
    assert np.array_equal(pb.polygons[0][0], polys.polygons[0][0]) and pb.metrics.tolist() == [7.0]


def test_feature_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    kids = tiles_in_bbox(B, 15)
    ft = FeatureTable(kids, rng.normal(size=(len(kids), 3)), ["a", "b", "c"])
    write_feature_csv(ft, tmp_path / "f.csv")
    back = read_feature_csv(tmp_path / "f.csv")
    assert back.tiles == ft.tiles and back.feature_names == ft.feature_names
    assert np.array_equal(back.features, ft.features)
