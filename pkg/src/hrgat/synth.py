"""Synthetic cities with planted spatial structure.

A city is a square block of zoom-13 tiles. Two latent fields drive everything:
an *activity* field (sum of Gaussian cores) and a *residential* field (its own
cores). Cells are placed with density growing faster than activity, since
operators densify busy areas. A third, broad *district* field sets how many
carriers a cell runs. It is only visible through sparse per-tile counts
(offices, commercial floor space, services), which are noisy at zoom 15 but
sharpen once aggregated to coarser tiles.
Daytime population is the planted dominant feature. It is the cell-bandwidth
demand (activity density times expected carriers) averaged over a commuting
catchment, which is close to the spatial scale the coverage proxy works at.
The other 29 columns are noisier transforms of the fields.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geodata import (
    FeatureSource,
    PointFeatureSet,
    PolygonFeatureSet,
    points_from_geojson,
    points_to_geojson,
    polygons_from_geojson,
    polygons_to_geojson,
    read_geojson,
)
from .graph import project_km
from .propagation import CellRecord, read_cells_csv, write_cells_csv
from .proxy import CellTrafficSeries, read_traffic_csv, write_traffic_csv
from .tiles import (
    BBox,
    GeoPoint,
    TileId,
    latlon_to_tile,
    latlon_to_tile_xy,
    tile_bounds,
    tile_center,
    tiles_in_bbox,
)

DIURNAL = np.array(
    [0.30, 0.22, 0.18, 0.15, 0.15, 0.20, 0.32, 0.48, 0.60, 0.65, 0.68, 0.72,
     0.75, 0.74, 0.72, 0.72, 0.76, 0.82, 0.88, 0.94, 1.00, 0.92, 0.70, 0.45]
)
DOMINANT_FEATURE = "daytime_population"
CITY_PRESETS = {
    "calgary": (51.0447, -114.0719),
    "montreal": (45.5019, -73.5674),
    "toronto": (43.6532, -79.3832),
    "vancouver": (49.2827, -123.1207),
    "ottawa": (45.4215, -75.6972),
}


@dataclass
class SynthConfig:
    seed: int = 0
    name: str = "city"
    center_lat: float = 45.4215
    center_lon: float = -75.6972
    z13_per_side: int = 6
    n_cores: int = 6
    n_res_cores: int = 6
    core_amp: tuple[float, float] = (0.6, 1.6)
    core_width_km: tuple[float, float] = (2.5, 6.0)
    n_district_cores: int = 3
    district_width_km: tuple[float, float] = (8.0, 14.0)
    district_block_zoom: int | None = 13
    n_cells: int = 2000
    cell_density_power: float = 1.5
    eirp_dbm: tuple[float, float] = (55.0, 61.0)
    max_extra_carriers: int = 3
    days: int = 15
    hours: int = 24
    feature_noise: float = 1.2
    dominant_noise: float = 0.3
    dominant_catchment_km: float = 2.5
    traffic_noise: float = 0.3
    missing_frac: float = 0.05
    census_block_km: float = 0.8

    def __post_init__(self):
        if self.days < 1 or self.hours < 1 or self.hours > 24:
            raise ValueError("days must be >= 1 and hours in 1..24")
        if self.n_cores < 1 or self.n_res_cores < 1:
            raise ValueError("need at least one urban core")
        if self.z13_per_side < 1:
            raise ValueError("degenerate city extent")


@dataclass
class Field:
    centers: np.ndarray  # (m, 2) km
    amps: np.ndarray
    widths: np.ndarray
    floor: float

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        d2 = ((xy[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return self.floor + (self.amps * np.exp(-d2 / (2 * self.widths**2))).sum(axis=1)

    def smoothed(self, scale_km: float) -> "Field":
        """Analytic convolution with an isotropic Gaussian of std ``scale_km``."""
        w2 = self.widths**2 + scale_km**2
        return Field(self.centers, self.amps * self.widths**2 / w2, np.sqrt(w2), self.floor)


@dataclass
class CityBundle:
    name: str
    bbox: BBox
    sources: list[FeatureSource]
    cells: list[CellRecord]
    traffic: dict[str, CellTrafficSeries]
    latent: dict[TileId, float]
    config: SynthConfig
    manifest: list[dict] = field(default_factory=list)
    # latent fields as functions of (lat, lon) arrays; empty for cities read from disk
    fields: dict[str, Callable] = field(default_factory=dict)


def city_bbox(cfg: SynthConfig) -> BBox:
    t = latlon_to_tile(GeoPoint(cfg.center_lat, cfg.center_lon), 13)
    x0, y0 = t.x - cfg.z13_per_side // 2, t.y - cfg.z13_per_side // 2
    nw = tile_bounds(TileId(x0, y0, 13))
    se = tile_bounds(TileId(x0 + cfg.z13_per_side - 1, y0 + cfg.z13_per_side - 1, 13))
    eps = 1e-7
    return BBox(se.min_lat + eps, nw.min_lon + eps, nw.max_lat - eps, se.max_lon - eps)


class _Geo:
    """Conversions between lat/lon and the city's local km frame."""

    def __init__(self, bbox: BBox):
        self.bbox = bbox
        self.ref_lat = 0.5 * (bbox.min_lat + bbox.max_lat)
        self.origin = project_km([bbox.min_lat], [bbox.min_lon], self.ref_lat)[0]
        top = project_km([bbox.max_lat], [bbox.max_lon], self.ref_lat)[0]
        self.size = top - self.origin

    def to_km(self, lat, lon) -> np.ndarray:
        return project_km(lat, lon, self.ref_lat) - self.origin

    def to_latlon(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xy = np.atleast_2d(xy) + self.origin
        lat = np.degrees(xy[:, 1] / 6371.0)
        lon = np.degrees(xy[:, 0] / (6371.0 * math.cos(math.radians(self.ref_lat))))
        return lat, lon


def _random_field(rng, geo: _Geo, n: int, amp, width, floor: float) -> Field:
    centers = rng.uniform(0.15, 0.85, size=(n, 2)) * geo.size
    return Field(centers, rng.uniform(*amp, size=n), rng.uniform(*width, size=n), floor)


class _Blocky:
    """A field held constant over each tile of one zoom level (its value at the tile center)."""

    def __init__(self, inner: Field, geo: _Geo, zoom: int):
        self.inner, self.geo, self.zoom = inner, geo, zoom
        self.floor = inner.floor
        self._cache: dict[tuple[int, int], float] = {}

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        lat, lon = self.geo.to_latlon(xy)
        tx, ty = latlon_to_tile_xy(lat, lon, self.zoom)
        keys, inv = np.unique(np.column_stack([tx, ty]), axis=0, return_inverse=True)
        vals = np.empty(len(keys))
        for i, (x, y) in enumerate(keys.tolist()):
            if (x, y) not in self._cache:
                c = tile_center(TileId(x, y, self.zoom))
                self._cache[(x, y)] = float(self.inner(self.geo.to_km([c.lat], [c.lon]))[0])
            vals[i] = self._cache[(x, y)]
        return vals[inv.ravel()]


def _blocky(inner: Field, geo: _Geo, zoom: int) -> _Blocky:
    return _Blocky(inner, geo, zoom)


def _smoothed(f, xy: np.ndarray, sigma_km: float, n: int = 9) -> np.ndarray:
    """Gaussian-weighted average of ``f`` around each point, on a fixed n x n stencil."""
    if sigma_km <= 0:
        return f(xy)
    u = np.linspace(-2.0, 2.0, n)
    du, dv = np.meshgrid(u, u, indexing="ij")
    w = np.exp(-0.5 * (du**2 + dv**2)).ravel()
    off = np.column_stack([du.ravel(), dv.ravel()]) * sigma_km
    acc = np.zeros(len(xy))
    for o, wk in zip(off, w):
        acc += wk * f(xy + o)
    return acc / w.sum()


def _sample_points(rng, geo: _Geo, intensity, n: int) -> np.ndarray:
    """Rejection-sample ``n`` km positions with density proportional to ``intensity``."""
    probe = rng.uniform(0, 1, size=(4096, 2)) * geo.size
    peak = float(intensity(probe).max()) * 1.2
    out = []
    while sum(len(o) for o in out) < n:
        cand = rng.uniform(0, 1, size=(4 * n + 64, 2)) * geo.size
        keep = rng.uniform(0, peak, size=len(cand)) < intensity(cand)
        out.append(cand[keep])
    return np.concatenate(out)[:n]


def _poisson_points(rng, geo: _Geo, intensity, mean_count: float) -> np.ndarray:
    return _sample_points(rng, geo, intensity, int(rng.poisson(mean_count)))


def _square(lat, lon, half_lat, half_lon) -> list[np.ndarray]:
    ring = np.array(
        [[lat - half_lat, lon - half_lon], [lat - half_lat, lon + half_lon],
         [lat + half_lat, lon + half_lon], [lat + half_lat, lon - half_lon],
         [lat - half_lat, lon - half_lon]]
    )
    return [ring]


def _grid_polygons(geo: _Geo, cell_km: float):
    """Axis-aligned lat/lon blocks of roughly ``cell_km`` covering the bbox."""
    b = geo.bbox
    nx = max(1, int(round(geo.size[0] / cell_km)))
    ny = max(1, int(round(geo.size[1] / cell_km)))
    lats = np.linspace(b.min_lat, b.max_lat, ny + 1)
    lons = np.linspace(b.min_lon, b.max_lon, nx + 1)
    polys, centers = [], []
    for i in range(ny):
        for j in range(nx):
            ring = np.array(
                [[lats[i], lons[j]], [lats[i], lons[j + 1]], [lats[i + 1], lons[j + 1]],
                 [lats[i + 1], lons[j]], [lats[i], lons[j]]]
            )
            polys.append([ring])
            centers.append(((lats[i] + lats[i + 1]) / 2, (lons[j] + lons[j + 1]) / 2))
    centers = np.array(centers)
    area = (geo.size[0] / nx) * (geo.size[1] / ny)
    return polys, centers, area


def generate_city(cfg: SynthConfig) -> CityBundle:
    rng = np.random.default_rng(cfg.seed)
    bbox = city_bbox(cfg)
    geo = _Geo(bbox)
    activity = _random_field(rng, geo, cfg.n_cores, cfg.core_amp, cfg.core_width_km, 0.05)
    residential = _random_field(rng, geo, cfg.n_res_cores, (0.5, 1.2), (1.5, 3.5), 0.1)
    district = _random_field(rng, geo, cfg.n_district_cores, (0.5, 1.5), cfg.district_width_km, 0.1)
    if cfg.district_block_zoom is not None:
        district = _blocky(district, geo, cfg.district_block_zoom)
    center_km = activity.centers[np.argmax(activity.amps)]

    def noise(size, sigma=None):
        s = cfg.feature_noise if sigma is None else sigma
        return np.exp(rng.normal(0.0, s, size=size) - 0.5 * s * s) if s > 0 else np.ones(size)

    sources: list[FeatureSource] = []
    manifest: list[dict] = []

    def add(name, data, mode, file):
        data.name = name
        sources.append(FeatureSource(name, data, mode))
        manifest.append({"feature": name, "file": file, "kind": type(data).__name__, "mode": mode})

    # census blocks: population-type metrics apportioned by area
    polys, cent, area = _grid_polygons(geo, cfg.census_block_km)
    ckm = geo.to_km(cent[:, 0], cent[:, 1])
    R, D, K = residential(ckm), activity(ckm), district(ckm)
    dist_c = np.sqrt(((ckm - center_km) ** 2).sum(axis=1))
    n_blk = len(polys)
    census = {
        "population": 3000 * R,
        "pop_age_0_14": 480 * R**1.1,
        "pop_age_15_64": 2000 * R,
        "pop_age_65_plus": 520 * R**0.9,
        "households": 1300 * R,
        "households_single": 500 * R**1.3,
        "households_family": 700 * R**0.8,
        "employed_population": 1500 * R**0.95 * K,
        "commute_0_3km": 600 * R * np.exp(-dist_c / 4.0),
        "commute_3_7km": 500 * R * (1 - np.exp(-dist_c / 4.0)),
        "commute_7_10km": 300 * R * np.clip(dist_c / 8.0, 0.05, 1.5),
        "commute_10_15km": 200 * R * np.clip(dist_c / 10.0, 0.05, 1.5),
        "commute_15plus_km": 120 * R * np.clip(dist_c / 12.0, 0.05, 1.5),
    }
    for name, dens in census.items():
        add(name, PolygonFeatureSet(name, polys, dens * area * noise(n_blk)), "metric", f"{name}.geojson")
    # daytime population: people present over a commuting catchment, weighted
    # toward busy areas inside employment districts
    k_lo, k_hi = district.floor, float(K.max())

    def staffed(s):
        # expected carriers per site, the same mapping used for cells below
        q = 0.05 + 0.9 * np.clip((district(s) - k_lo) / max(k_hi - k_lo, 1e-12), 0.0, 1.0)
        return activity(s) ** cfg.cell_density_power * (1 + cfg.max_extra_carriers * q)

    day = _smoothed(staffed, ckm, cfg.dominant_catchment_km)
    dom = 5000 * day * area * noise(n_blk, cfg.dominant_noise)
    add(DOMINANT_FEATURE, PolygonFeatureSet(DOMINANT_FEATURE, polys, dom), "metric", f"{DOMINANT_FEATURE}.geojson")

    # nighttime luminosity raster
    px, pcent, parea = _grid_polygons(geo, 0.45)
    pkm = geo.to_km(pcent[:, 0], pcent[:, 1])
    ntl = 60 * (activity(pkm) + 0.3 * residential(pkm)) ** 0.7 * parea * noise(len(px))
    add("nighttime_luminosity", PolygonFeatureSet("nighttime_luminosity", px, ntl), "metric",
        "nighttime_luminosity.geojson")

    km_per_deg_lat = 6371.0 * math.pi / 180.0
    km_per_deg_lon = km_per_deg_lat * math.cos(math.radians(geo.ref_lat))
    city_area = float(geo.size[0] * geo.size[1])

    def footprints(intensity, per_km2, side_m):
        pts = _poisson_points(rng, geo, intensity, per_km2 * city_area)
        lat, lon = geo.to_latlon(pts)
        half = rng.uniform(*side_m, size=len(pts)) / 2000.0
        return [_square(a, o, h / km_per_deg_lat, h / km_per_deg_lon) for a, o, h in zip(lat, lon, half)]

    bldg = footprints(lambda s: 0.6 * residential(s) + 0.4 * activity(s), 22.0, (12, 40))
    bset = PolygonFeatureSet("buildings", bldg)
    add("building_count", bset, "count", "buildings.geojson")
    add("building_area", PolygonFeatureSet("buildings", bset.polygons), "area", "buildings.geojson")
    add("commercial_building_area", PolygonFeatureSet("x", footprints(lambda s: activity(s) * district(s), 6.0, (30, 80))), "area",
        "commercial_buildings.geojson")
    add("green_space_area", PolygonFeatureSet("x", footprints(lambda s: 1.0 / (0.3 + activity(s)), 0.8, (80, 250))),
        "area", "green_space.geojson")

    def points(intensity, per_km2, weight=None):
        pts = _poisson_points(rng, geo, intensity, per_km2 * city_area)
        lat, lon = geo.to_latlon(pts)
        w = None if weight is None else rng.uniform(*weight, size=len(pts))
        return PointFeatureSet("x", lat, lon, w)

    roads = points(lambda s: np.sqrt(residential(s) + activity(s)), 40.0, (0.05, 0.25))
    add("road_length", roads, "sum", "roads.geojson")
    add("road_count", PointFeatureSet("roads", roads.lats, roads.lons, roads.weights), "count", "roads.geojson")
    add("major_road_length", points(lambda s: np.sqrt(activity(s)), 6.0, (0.2, 0.8)), "sum", "major_roads.geojson")
    add("transit_stops", points(lambda s: activity(s) + 0.5 * residential(s), 8.0), "count", "transit_stops.geojson")
    add("rail_stations", points(lambda s: activity(s) ** 2, 0.4), "count", "rail_stations.geojson")
    add("biz_retail", points(activity, 10.0), "count", "biz_retail.geojson")
    add("biz_food", points(lambda s: activity(s) ** 0.9, 8.0), "count", "biz_food.geojson")
    add("biz_office", points(lambda s: activity(s) ** 1.5 * district(s) ** 2, 6.0), "count", "biz_office.geojson")
    add("biz_industrial", points(lambda s: 0.2 + 0.8 / (0.3 + activity(s)), 2.0), "count", "biz_industrial.geojson")
    add("biz_services", points(lambda s: (activity(s) + residential(s)) * district(s), 6.0), "count", "biz_services.geojson")
    add("biz_small", points(lambda s: 0.5 * activity(s) + residential(s), 8.0), "count", "biz_small.geojson")

    # cells: density follows activity; carrier count follows the district field
    cpos = _sample_points(rng, geo, lambda xy: activity(xy) ** cfg.cell_density_power, cfg.n_cells)
    clat, clon = geo.to_latlon(cpos)
    dist_val = district(cpos)
    lo, hi = district.floor, float(district(cpos).max())
    q = 0.05 + 0.9 * (dist_val - lo) / max(hi - lo, 1e-12)
    n_carriers = 1 + rng.binomial(cfg.max_extra_carriers, q)
    cells = []
    for i in range(cfg.n_cells):
        cells.append(
            CellRecord(
                cell_id=f"{cfg.name}-{i:04d}",
                location=GeoPoint(float(clat[i]), float(clon[i])),
                eirp_dbm=float(np.round(rng.uniform(*cfg.eirp_dbm), 2)),
                antenna_height_m=float(np.round(rng.uniform(20.0, 40.0), 1)),
                freq_mhz=float(rng.choice([1700.0, 1800.0, 1900.0])),
                bandwidth_mhz=float(5.0 * n_carriers[i]),
            )
        )

    # hourly traffic with a few missing observations
    traffic = {}
    act = activity(cpos)
    for i, cell in enumerate(cells):
        days, hours, vals = [], [], []
        for d in range(1, cfg.days + 1):
            present = rng.random(cfg.hours) >= cfg.missing_frac
            if not present.any():
                present[rng.integers(cfg.hours)] = True
            for h in np.flatnonzero(present):
                v = 40.0 * act[i] * cell.bandwidth_mhz / 10.0 * DIURNAL[h] * noise(1, cfg.traffic_noise)[0]
                days.append(d)
                hours.append(int(h))
                vals.append(float(v))
        traffic[cell.cell_id] = CellTrafficSeries(cell.cell_id, days, hours, vals)

    latent = {}
    for t in tiles_in_bbox(bbox, 15):
        c = tile_center(t)
        latent[t] = float(activity(geo.to_km([c.lat], [c.lon]))[0])
    fields = {
        name: (lambda f: lambda lat, lon: f(geo.to_km(lat, lon)))(f)
        for name, f in (("activity", activity), ("residential", residential), ("district", district))
    }
    return CityBundle(cfg.name, bbox, sources, cells, traffic, latent, cfg, manifest, fields)


def write_city(bundle: CityBundle, out: str | Path) -> Path:
    out = Path(out)
    (out / "sources").mkdir(parents=True, exist_ok=True)
    written = set()
    for src, entry in zip(bundle.sources, bundle.manifest):
        if entry["file"] in written:
            continue
        written.add(entry["file"])
        doc = points_to_geojson(src.data) if isinstance(src.data, PointFeatureSet) else polygons_to_geojson(src.data)
        with open(out / "sources" / entry["file"], "w") as fh:
            json.dump(doc, fh)
    write_cells_csv(bundle.cells, out / "cells.csv")
    write_traffic_csv(bundle.traffic.values(), out / "traffic.csv")
    with open(out / "latent.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quadkey", "activity"])
        for t, v in bundle.latent.items():
            w.writerow([t.quadkey, repr(v)])
    b = bundle.bbox
    meta = {
        "name": bundle.name,
        "bbox": {"min_lat": b.min_lat, "min_lon": b.min_lon, "max_lat": b.max_lat, "max_lon": b.max_lon},
        "sources": bundle.manifest,
        "dominant_feature": DOMINANT_FEATURE,
        "synth_config": asdict(bundle.config),
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return out


def load_sources(city_dir: str | Path) -> tuple[BBox, list[FeatureSource], dict]:
    city_dir = Path(city_dir)
    with open(city_dir / "meta.json") as fh:
        meta = json.load(fh)
    bbox = BBox(**meta["bbox"])
    cache: dict[tuple[str, str], object] = {}
    sources = []
    for entry in meta["sources"]:
        key = (entry["file"], entry["kind"])
        if key not in cache:
            doc = read_geojson(city_dir / "sources" / entry["file"])
            reader = points_from_geojson if entry["kind"] == "PointFeatureSet" else polygons_from_geojson
            cache[key] = reader(entry["feature"], doc)
        sources.append(FeatureSource(entry["feature"], cache[key], entry["mode"]))
    return bbox, sources, meta


def load_city(city_dir: str | Path) -> CityBundle:
    city_dir = Path(city_dir)
    bbox, sources, meta = load_sources(city_dir)
    cells = read_cells_csv(city_dir / "cells.csv")
    traffic = read_traffic_csv(city_dir / "traffic.csv")
    cfg = meta.get("synth_config", {})
    for k in ("core_amp", "core_width_km", "district_width_km", "eirp_dbm"):
        if k in cfg:
            cfg[k] = tuple(cfg[k])
    return CityBundle(meta["name"], bbox, sources, cells, traffic, {}, SynthConfig(**cfg), meta["sources"])
