"""Aggregation of point and polygon sources into per-tile feature tables."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import shapely

from .tiles import BBox, TileId, latlon_to_tile_xy, quadkey_to_tile, tile_bounds, tiles_in_bbox

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
NORM_EPS = 1e-12


@dataclass
class PointFeatureSet:
    name: str
    lats: np.ndarray
    lons: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.lats = np.asarray(self.lats, dtype=float)
        self.lons = np.asarray(self.lons, dtype=float)
        if self.lats.shape != self.lons.shape:
            raise ValueError(f"{self.name}: lat/lon length mismatch")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != self.lats.shape:
                raise ValueError(f"{self.name}: weight length mismatch")


@dataclass
class PolygonFeatureSet:
    """Polygons as lists of rings; each ring is an (n, 2) array of (lat, lon), closed."""

    name: str
    polygons: list[list[np.ndarray]]
    metrics: np.ndarray | None = None

    def __post_init__(self):
        self.polygons = [[np.asarray(r, dtype=float) for r in rings] for rings in self.polygons]
        for rings in self.polygons:
            for ring in rings:
                if len(ring) < 4 or not np.array_equal(ring[0], ring[-1]):
                    raise ValueError(f"{self.name}: polygon rings must be closed")
        if self.metrics is not None:
            self.metrics = np.asarray(self.metrics, dtype=float)
            if len(self.metrics) != len(self.polygons):
                raise ValueError(f"{self.name}: metric length mismatch")


@dataclass
class FeatureSource:
    """One output column: a source set plus the aggregation mode that produces it.

    Point modes: ``count`` (unit weights) or ``sum`` (per-point weights).
    Polygon modes: ``count``, ``area`` or ``metric``.
    """

    name: str
    data: PointFeatureSet | PolygonFeatureSet
    mode: str = "count"


@dataclass
class FeatureTable:
    tiles: list[TileId]
    features: np.ndarray
    feature_names: list[str]
    norm_stats: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape != (len(self.tiles), len(self.feature_names)):
            raise ValueError(
                f"feature matrix {self.features.shape} does not match "
                f"{len(self.tiles)} tiles x {len(self.feature_names)} features"
            )

    @property
    def zoom(self) -> int:
        return self.tiles[0].zoom

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.feature_names.index(name)]


@dataclass
class _TileIndex:
    tiles: list[TileId]
    zoom: int
    lookup: dict[tuple[int, int], int] = field(default_factory=dict)

    @classmethod
    def build(cls, tiles: Sequence[TileId]) -> "_TileIndex":
        if not tiles:
            raise ValueError("empty tile list")
        zooms = {t.zoom for t in tiles}
        if len(zooms) != 1:
            raise ValueError(f"tiles span several zoom levels: {sorted(zooms)}")
        idx = cls(list(tiles), zooms.pop())
        idx.lookup = {(t.x, t.y): i for i, t in enumerate(tiles)}
        return idx

    def locate(self, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
        """Row index of the containing tile, -1 when outside the tile set."""
        xs, ys = latlon_to_tile_xy(lats, lons, self.zoom)
        return np.array([self.lookup.get((int(x), int(y)), -1) for x, y in zip(xs, ys)], dtype=np.int64)


def aggregate_points(
    pf: PointFeatureSet, tiles: Sequence[TileId], use_weights: bool = True, diagnostics: dict | None = None
) -> np.ndarray:
    index = _TileIndex.build(tiles)
    column = np.zeros(len(tiles))
    if len(pf.lats) == 0:
        return column
    rows = index.locate(pf.lats, pf.lons)
    weights = pf.weights if (use_weights and pf.weights is not None) else np.ones(len(rows))
    inside = rows >= 0
    np.add.at(column, rows[inside], weights[inside])
    dropped = int((~inside).sum())
    if diagnostics is not None:
        diagnostics[pf.name] = diagnostics.get(pf.name, 0) + dropped
    if dropped:
        log.debug("%s: %d points outside the tile set", pf.name, dropped)
    return column


class _Projector:
    """Equirectangular projection to metres at a fixed reference latitude."""

    def __init__(self, ref_lat: float):
        self.kx = EARTH_RADIUS_M * math.radians(1.0) * math.cos(math.radians(ref_lat))
        self.ky = EARTH_RADIUS_M * math.radians(1.0)

    def ring(self, ring: np.ndarray) -> np.ndarray:
        return np.column_stack([ring[:, 1] * self.kx, ring[:, 0] * self.ky])

    def inverse(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return xy[:, 1] / self.ky, xy[:, 0] / self.kx


def _mean_latitude(tiles: Sequence[TileId]) -> float:
    b = [tile_bounds(t) for t in tiles]
    return 0.5 * (min(x.min_lat for x in b) + max(x.max_lat for x in b))


def _polygon_geoms(pf: PolygonFeatureSet, proj: _Projector) -> np.ndarray:
    return np.array(
        [shapely.Polygon(proj.ring(rings[0]), [proj.ring(h) for h in rings[1:]]) for rings in pf.polygons],
        dtype=object,
    )


def polygon_overlap(
    pf: PolygonFeatureSet, tiles: Sequence[TileId], ref_lat: float | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sparse polygon/tile overlap as ``(poly_idx, tile_idx, overlap_area_m2, polygon_area_m2)``."""
    index = _TileIndex.build(tiles)
    proj = _Projector(_mean_latitude(tiles) if ref_lat is None else ref_lat)
    geoms = _polygon_geoms(pf, proj)
    poly_area = shapely.area(geoms) if len(geoms) else np.zeros(0)
    pi_list, ti_list = [], []
    if pf.polygons:
        lat_hi = np.array([r[0][:, 0].max() for r in pf.polygons])
        lat_lo = np.array([r[0][:, 0].min() for r in pf.polygons])
        lon_lo = np.array([r[0][:, 1].min() for r in pf.polygons])
        lon_hi = np.array([r[0][:, 1].max() for r in pf.polygons])
        x0, y0 = latlon_to_tile_xy(lat_hi, lon_lo, index.zoom)
        x1, y1 = latlon_to_tile_xy(lat_lo, lon_hi, index.zoom)
        for i in range(len(pf.polygons)):
            for y in range(y0[i], y1[i] + 1):
                for x in range(x0[i], x1[i] + 1):
                    j = index.lookup.get((x, y))
                    if j is not None:
                        pi_list.append(i)
                        ti_list.append(j)
    pi = np.asarray(pi_list, dtype=np.int64)
    ti = np.asarray(ti_list, dtype=np.int64)
    if len(pi) == 0:
        return pi, ti, np.zeros(0), poly_area
    boxes = []
    for t in tiles:
        b = tile_bounds(t)
        boxes.append(shapely.box(b.min_lon * proj.kx, b.min_lat * proj.ky, b.max_lon * proj.kx, b.max_lat * proj.ky))
    boxes = np.array(boxes, dtype=object)
    overlap = shapely.area(shapely.intersection(geoms[pi], boxes[ti]))
    keep = overlap > 0
    return pi[keep], ti[keep], overlap[keep], poly_area


def aggregate_polygons(
    pf: PolygonFeatureSet,
    tiles: Sequence[TileId],
    mode: str = "count",
    ref_lat: float | None = None,
    diagnostics: dict | None = None,
    overlap: tuple | None = None,
) -> np.ndarray:
    """Per-tile column from polygons.

    ``count`` adds 1 to the tile holding each centroid; ``area`` and ``metric``
    apportion the polygon area (or its metric value) by clipped overlap fraction.
    ``overlap`` may carry a precomputed result of :func:`polygon_overlap`.
    """
    if mode not in ("count", "area", "metric"):
        raise ValueError(f"unknown polygon aggregation mode {mode!r}")
    if mode == "metric" and pf.metrics is None:
        raise ValueError(f"{pf.name}: metric mode requires per-polygon values")
    index = _TileIndex.build(tiles)
    column = np.zeros(len(tiles))
    if not pf.polygons:
        return column
    ref = _mean_latitude(tiles) if ref_lat is None else ref_lat
    if mode == "count":
        proj = _Projector(ref)
        cents = shapely.get_coordinates(shapely.centroid(_polygon_geoms(pf, proj)))
        lats, lons = proj.inverse(cents)
        rows = index.locate(lats, lons)
        inside = rows >= 0
        np.add.at(column, rows[inside], 1.0)
        if diagnostics is not None:
            diagnostics[pf.name] = diagnostics.get(pf.name, 0) + int((~inside).sum())
        return column
    pi, ti, area, poly_area = overlap if overlap is not None else polygon_overlap(pf, tiles, ref)
    if mode == "area":
        np.add.at(column, ti, area)
    else:
        frac = area / poly_area[pi]
        np.add.at(column, ti, pf.metrics[pi] * frac)
    return column


def _geometry_key(pf: PolygonFeatureSet) -> bytes:
    h = hashlib.sha1()
    for rings in pf.polygons:
        for r in rings:
            h.update(r.tobytes())
        h.update(b"|")
    return h.digest()


def build_feature_table(
    sources: Sequence[FeatureSource],
    bbox: BBox,
    zooms: Sequence[int] = (13, 14, 15),
    diagnostics: dict | None = None,
) -> dict[int, FeatureTable]:
    """One FeatureTable per zoom over every tile intersecting ``bbox``."""
    names = [s.name for s in sources]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ValueError(f"feature name collision: {dupes}")
    tables = {}
    for z in zooms:
        tiles = tiles_in_bbox(bbox, z)
        overlaps: dict[bytes, tuple] = {}
        ref_lat = 0.5 * (bbox.min_lat + bbox.max_lat)
        cols = []
        for src in sources:
            if isinstance(src.data, PointFeatureSet):
                if src.mode not in ("count", "sum"):
                    raise ValueError(f"{src.name}: point mode must be count or sum, got {src.mode!r}")
                cols.append(aggregate_points(src.data, tiles, use_weights=src.mode == "sum", diagnostics=diagnostics))
            else:
                ov = None
                if src.mode != "count":
                    key = _geometry_key(src.data)
                    if key not in overlaps:
                        overlaps[key] = polygon_overlap(src.data, tiles, ref_lat)
                    ov = overlaps[key]
                cols.append(
                    aggregate_polygons(src.data, tiles, src.mode, ref_lat=ref_lat, diagnostics=diagnostics, overlap=ov)
                )
        matrix = np.column_stack(cols) if cols else np.zeros((len(tiles), 0))
        tables[z] = FeatureTable(tiles, matrix, names)
    return tables


def fit_norm_stats(features: np.ndarray, train_rows) -> dict[str, np.ndarray]:
    rows = np.asarray(train_rows)
    if rows.size == 0:
        raise ValueError("normalization needs at least one training row")
    train = np.asarray(features, dtype=float)[rows]
    return {"mean": train.mean(axis=0), "std": train.std(axis=0)}


def apply_norm(features: np.ndarray, stats: dict[str, np.ndarray]) -> np.ndarray:
    std = stats["std"]
    live = std >= NORM_EPS
    out = np.zeros_like(np.asarray(features, dtype=float))
    out[:, live] = (features[:, live] - stats["mean"][live]) / std[live]
    return out


def normalize(ft: FeatureTable, train_rows) -> FeatureTable:
    """Z-score every column with statistics from ``train_rows`` only."""
    stats = fit_norm_stats(ft.features, train_rows)
    return FeatureTable(list(ft.tiles), apply_norm(ft.features, stats), list(ft.feature_names), stats)


# --- file formats ---------------------------------------------------------


def read_geojson(path: str | Path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: not a GeoJSON FeatureCollection")
    return doc


def points_from_geojson(name: str, doc: dict) -> PointFeatureSet:
    lats, lons, weights = [], [], []
    any_weight = False
    for feat in doc["features"]:
        geom = feat["geometry"]
        if geom["type"] != "Point":
            raise ValueError(f"{name}: expected Point geometry, got {geom['type']}")
        lon, lat = geom["coordinates"][:2]
        lats.append(lat)
        lons.append(lon)
        w = (feat.get("properties") or {}).get("weight")
        any_weight |= w is not None
        weights.append(1.0 if w is None else float(w))
    return PointFeatureSet(name, np.array(lats), np.array(lons), np.array(weights) if any_weight else None)


def polygons_from_geojson(name: str, doc: dict) -> PolygonFeatureSet:
    polys, metrics = [], []
    for feat in doc["features"]:
        geom = feat["geometry"]
        if geom["type"] == "Polygon":
            parts = [geom["coordinates"]]
        elif geom["type"] == "MultiPolygon":
            parts = geom["coordinates"]
        else:
            raise ValueError(f"{name}: expected Polygon geometry, got {geom['type']}")
        m = (feat.get("properties") or {}).get("metric")
        total = sum(shapely.area(shapely.Polygon(p[0])) for p in parts) if len(parts) > 1 else None
        for p in parts:
            polys.append([np.asarray(r, dtype=float)[:, ::-1] for r in p])
            if m is None:
                metrics.append(math.nan)
            elif total:
                metrics.append(float(m) * shapely.area(shapely.Polygon(p[0])) / total)
            else:
                metrics.append(float(m))
    arr = np.array(metrics, dtype=float)
    return PolygonFeatureSet(name, polys, None if np.isnan(arr).any() or len(arr) == 0 else arr)


def points_to_geojson(pf: PointFeatureSet) -> dict:
    feats = []
    for i in range(len(pf.lats)):
        props = {} if pf.weights is None else {"weight": float(pf.weights[i])}
        feats.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(pf.lons[i]), float(pf.lats[i])]},
                "properties": props,
            }
        )
    return {"type": "FeatureCollection", "features": feats}


def polygons_to_geojson(pf: PolygonFeatureSet) -> dict:
    feats = []
    for i, rings in enumerate(pf.polygons):
        props = {} if pf.metrics is None else {"metric": float(pf.metrics[i])}
        coords = [[[float(lon), float(lat)] for lat, lon in ring] for ring in rings]
        feats.append({"type": "Feature", "geometry": {"type": "Polygon", "coordinates": coords}, "properties": props})
    return {"type": "FeatureCollection", "features": feats}


def write_feature_csv(ft: FeatureTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quadkey", *ft.feature_names])
        for t, row in zip(ft.tiles, ft.features):
            w.writerow([t.quadkey, *(repr(float(v)) for v in row)])


def read_feature_csv(path: str | Path) -> FeatureTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "quadkey":
        raise ValueError(f"{path}: first column must be quadkey")
    tiles = [quadkey_to_tile(r[0]) for r in body]
    feats = np.array([[float(v) for v in r[1:]] for r in body], dtype=float).reshape(len(body), len(header) - 1)
    return FeatureTable(tiles, feats, header[1:])
