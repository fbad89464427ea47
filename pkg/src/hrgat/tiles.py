"""Web-Mercator quadtree tile arithmetic (Bing-style tiles and quadkeys)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

MIN_LAT, MAX_LAT = -85.05112878, 85.05112878
MIN_LON, MAX_LON = -180.0, 180.0
MIN_ZOOM, MAX_ZOOM = 1, 23
TILE_SIZE = 256


@dataclass(frozen=True, order=True)
class TileId:
    x: int
    y: int
    zoom: int

    def __post_init__(self):
        if not MIN_ZOOM <= self.zoom <= MAX_ZOOM:
            raise ValueError(f"zoom {self.zoom} outside [{MIN_ZOOM}, {MAX_ZOOM}]")
        n = 1 << self.zoom
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise ValueError(f"tile ({self.x}, {self.y}) outside zoom-{self.zoom} grid")

    @property
    def quadkey(self) -> str:
        return tile_to_quadkey(self)


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float


@dataclass(frozen=True)
class BBox:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def __post_init__(self):
        if not (self.min_lat < self.max_lat and self.min_lon < self.max_lon):
            raise ValueError(f"degenerate bbox {self}")

    def contains(self, p: GeoPoint) -> bool:
        return self.min_lat <= p.lat <= self.max_lat and self.min_lon <= p.lon <= self.max_lon

    def contains_bbox(self, other: "BBox", tol: float = 0.0) -> bool:
        return (
            self.min_lat - tol <= other.min_lat
            and self.min_lon - tol <= other.min_lon
            and other.max_lat <= self.max_lat + tol
            and other.max_lon <= self.max_lon + tol
        )


def _check_zoom(zoom: int) -> None:
    if not MIN_ZOOM <= zoom <= MAX_ZOOM:
        raise ValueError(f"zoom {zoom} outside [{MIN_ZOOM}, {MAX_ZOOM}]")


def clip_lat(lat: float) -> float:
    return min(max(lat, MIN_LAT), MAX_LAT)


def latlon_to_tile(p: GeoPoint, zoom: int) -> TileId:
    """Tile containing ``p`` at ``zoom``. Latitude is clamped to the Mercator limits."""
    _check_zoom(zoom)
    lat = math.radians(clip_lat(p.lat))
    n = 1 << zoom
    fx = (p.lon + 180.0) / 360.0
    sin_lat = math.sin(lat)
    fy = 0.5 - math.log((1 + sin_lat) / (1 - sin_lat)) / (4 * math.pi)
    x = min(max(int(math.floor(fx * n)), 0), n - 1)
    y = min(max(int(math.floor(fy * n)), 0), n - 1)
    return TileId(x, y, zoom)


def tile_to_quadkey(t: TileId) -> str:
    digits = []
    for i in range(t.zoom, 0, -1):
        mask = 1 << (i - 1)
        digit = (1 if t.x & mask else 0) + (2 if t.y & mask else 0)
        digits.append(str(digit))
    return "".join(digits)


def quadkey_to_tile(quadkey: str) -> TileId:
    if not quadkey:
        raise ValueError("empty quadkey")
    x = y = 0
    zoom = len(quadkey)
    for i, ch in enumerate(quadkey):
        mask = 1 << (zoom - i - 1)
        if ch == "1":
            x |= mask
        elif ch == "2":
            y |= mask
        elif ch == "3":
            x |= mask
            y |= mask
        elif ch != "0":
            raise ValueError(f"invalid quadkey digit {ch!r} in {quadkey!r}")
    return TileId(x, y, zoom)


def parent(t: TileId) -> TileId:
    if t.zoom <= MIN_ZOOM:
        raise ValueError(f"tile {t} has no parent")
    return TileId(t.x >> 1, t.y >> 1, t.zoom - 1)


def children(t: TileId) -> list[TileId]:
    if t.zoom >= MAX_ZOOM:
        raise ValueError(f"tile {t} has no children")
    x, y, z = 2 * t.x, 2 * t.y, t.zoom + 1
    return [TileId(x, y, z), TileId(x + 1, y, z), TileId(x, y + 1, z), TileId(x + 1, y + 1, z)]


def ancestor(t: TileId, zoom: int) -> TileId:
    """Ancestor of ``t`` at a coarser (or equal) zoom."""
    if zoom > t.zoom:
        raise ValueError(f"zoom {zoom} is finer than tile zoom {t.zoom}")
    shift = t.zoom - zoom
    return TileId(t.x >> shift, t.y >> shift, zoom)


def _norm_to_lat(fy: float) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1 - 2 * fy))))


def _norm_to_lon(fx: float) -> float:
    return fx * 360.0 - 180.0


def tile_bounds(t: TileId) -> BBox:
    n = 1 << t.zoom
    return BBox(
        min_lat=_norm_to_lat((t.y + 1) / n),
        min_lon=_norm_to_lon(t.x / n),
        max_lat=_norm_to_lat(t.y / n),
        max_lon=_norm_to_lon((t.x + 1) / n),
    )


def tile_center(t: TileId) -> GeoPoint:
    n = 1 << t.zoom
    return GeoPoint(lat=_norm_to_lat((t.y + 0.5) / n), lon=_norm_to_lon((t.x + 0.5) / n))


def tiles_in_bbox(bbox: BBox, zoom: int) -> list[TileId]:
    """All tiles at ``zoom`` intersecting ``bbox``, row-major (y then x)."""
    nw = latlon_to_tile(GeoPoint(bbox.max_lat, bbox.min_lon), zoom)
    se = latlon_to_tile(GeoPoint(bbox.min_lat, bbox.max_lon), zoom)
    return [TileId(x, y, zoom) for y in range(nw.y, se.y + 1) for x in range(nw.x, se.x + 1)]


def iter_descendants(t: TileId, zoom: int) -> Iterator[TileId]:
    if zoom < t.zoom:
        raise ValueError("descendant zoom must not be coarser than the tile")
    shift = zoom - t.zoom
    for y in range(t.y << shift, (t.y + 1) << shift):
        for x in range(t.x << shift, (t.x + 1) << shift):
            yield TileId(x, y, zoom)


def latlon_to_tile_xy(lat, lon, zoom: int):
    """Vectorized ``latlon_to_tile`` returning integer column/row arrays."""
    _check_zoom(zoom)
    lat = np.radians(np.clip(np.asarray(lat, dtype=float), MIN_LAT, MAX_LAT))
    lon = np.asarray(lon, dtype=float)
    n = 1 << zoom
    sin_lat = np.sin(lat)
    fx = (lon + 180.0) / 360.0
    fy = 0.5 - np.log((1 + sin_lat) / (1 - sin_lat)) / (4 * math.pi)
    x = np.clip(np.floor(fx * n).astype(np.int64), 0, n - 1)
    y = np.clip(np.floor(fy * n).astype(np.int64), 0, n - 1)
    return x, y
