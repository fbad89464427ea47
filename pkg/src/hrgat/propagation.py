"""COST-231 Hata path loss and cell-to-tile coverage mapping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tiles import GeoPoint, TileId, latlon_to_tile, tile_center

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
MIN_DISTANCE_KM = 0.02
MAX_RADIUS_KM = 20.0
DEFAULT_MOBILE_HEIGHT_M = 1.5
DEFAULT_RX_SENSITIVITY_DBM = -100.0


@dataclass(frozen=True)
class CellRecord:
    cell_id: str
    location: GeoPoint
    eirp_dbm: float
    antenna_height_m: float
    freq_mhz: float
    bandwidth_mhz: float

    def __post_init__(self):
        if not 1.0 <= self.antenna_height_m <= 300.0:
            raise ValueError(f"{self.cell_id}: antenna height {self.antenna_height_m} m outside [1, 300]")
        if not 150.0 <= self.freq_mhz <= 2000.0:
            raise ValueError(f"{self.cell_id}: frequency {self.freq_mhz} MHz outside [150, 2000]")
        if self.bandwidth_mhz <= 0:
            raise ValueError(f"{self.cell_id}: bandwidth must be positive")


@dataclass
class CoverageMap:
    """Cell -> covered tiles and its transpose, tile -> covering cells."""

    tiles_of: dict[str, list[TileId]]
    cells_of: dict[TileId, list[str]] = field(default_factory=dict)
    radius_km: dict[str, float] = field(default_factory=dict)
    clamped: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.cells_of:
            for cid, tiles in self.tiles_of.items():
                for t in tiles:
                    self.cells_of.setdefault(t, []).append(cid)


def _hata_terms(freq_mhz: float, h_b: float, h_m: float) -> tuple[float, float]:
    """(loss at 1 km, slope per decade of distance)."""
    lf = math.log10(freq_mhz)
    lhb = math.log10(h_b)
    a_hm = (1.1 * lf - 0.7) * h_m - (1.56 * lf - 0.8)
    intercept = 46.3 + 33.9 * lf - 13.82 * lhb - a_hm
    slope = 44.9 - 6.55 * lhb
    return intercept, slope


def _check_params(freq_mhz: float, h_b: float, h_m: float) -> None:
    if not 150.0 <= freq_mhz <= 2000.0:
        raise ValueError(f"frequency {freq_mhz} MHz outside [150, 2000]")
    if not 1.0 <= h_b <= 300.0:
        raise ValueError(f"base height {h_b} m outside [1, 300]")
    if not 1.0 <= h_m <= 10.0:
        raise ValueError(f"mobile height {h_m} m outside [1, 10]")


def path_loss_db(freq_mhz: float, h_b: float, h_m: float, d_km) -> float | np.ndarray:
    """COST-231 Hata, urban medium-city (C = 0). Accepts scalar or array distance."""
    _check_params(freq_mhz, h_b, h_m)
    d = np.asarray(d_km, dtype=float)
    if np.any(d < MIN_DISTANCE_KM) or not np.all(np.isfinite(d)):
        raise ValueError(f"distance must be >= {MIN_DISTANCE_KM} km")
    intercept, slope = _hata_terms(freq_mhz, h_b, h_m)
    pl = intercept + slope * np.log10(d)
    return float(pl) if pl.ndim == 0 else pl


def coverage_radius_km(
    cell: CellRecord,
    rx_sensitivity_dbm: float = DEFAULT_RX_SENSITIVITY_DBM,
    mobile_height_m: float = DEFAULT_MOBILE_HEIGHT_M,
    clamp: bool = True,
) -> tuple[float, bool]:
    """Distance at which received power falls to the sensitivity.

    Returns ``(radius_km, clamped)``; ``clamped`` flags a link budget too small
    to reach even the minimum distance.
    """
    _check_params(cell.freq_mhz, cell.antenna_height_m, mobile_height_m)
    intercept, slope = _hata_terms(cell.freq_mhz, cell.antenna_height_m, mobile_height_m)
    budget = cell.eirp_dbm - rx_sensitivity_dbm
    d = 10.0 ** ((budget - intercept) / slope)
    if not clamp:
        return d, False
    if d < MIN_DISTANCE_KM:
        log.warning("%s: link budget %.1f dB below minimum-distance loss", cell.cell_id, budget)
        return MIN_DISTANCE_KM, True
    return min(d, MAX_RADIUS_KM), False


def haversine_km(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def build_coverage_map(
    cells: Sequence[CellRecord],
    tiles: Sequence[TileId],
    rx_sensitivity_dbm: float = DEFAULT_RX_SENSITIVITY_DBM,
    mobile_height_m: float = DEFAULT_MOBILE_HEIGHT_M,
) -> CoverageMap:
    """Tile g is covered by cell i iff its center lies within the cell's radius.

    A cell always covers its own containing tile. Cells whose containing tile is
    not in ``tiles`` are skipped and listed in ``dropped``.
    """
    if not cells or not tiles:
        raise ValueError("coverage needs at least one cell and one tile")
    zoom = tiles[0].zoom
    centers = [tile_center(t) for t in tiles]
    clat = np.array([c.lat for c in centers])
    clon = np.array([c.lon for c in centers])
    position = {t: i for i, t in enumerate(tiles)}
    tiles_of: dict[str, list[TileId]] = {}
    radius: dict[str, float] = {}
    clamped, dropped = [], []
    for cell in cells:
        own = latlon_to_tile(cell.location, zoom)
        if own not in position:
            dropped.append(cell.cell_id)
            continue
        r, flag = coverage_radius_km(cell, rx_sensitivity_dbm, mobile_height_m)
        if flag:
            clamped.append(cell.cell_id)
        d = haversine_km(cell.location.lat, cell.location.lon, clat, clon)
        hit = set(np.flatnonzero(d <= r).tolist())
        hit.add(position[own])
        tiles_of[cell.cell_id] = [tiles[i] for i in sorted(hit)]
        radius[cell.cell_id] = r
    if dropped:
        log.info("%d cells outside the tile set were skipped", len(dropped))
    return CoverageMap(tiles_of, radius_km=radius, clamped=clamped, dropped=dropped)


CELL_FIELDS = ["cell_id", "lat", "lon", "eirp_dbm", "antenna_height_m", "freq_mhz", "bandwidth_mhz"]


def read_cells_csv(path: str | Path) -> list[CellRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CELL_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            CellRecord(
                cell_id=row["cell_id"],
                location=GeoPoint(float(row["lat"]), float(row["lon"])),
                eirp_dbm=float(row["eirp_dbm"]),
                antenna_height_m=float(row["antenna_height_m"]),
                freq_mhz=float(row["freq_mhz"]),
                bandwidth_mhz=float(row["bandwidth_mhz"]),
            )
            for row in reader
        ]


def write_cells_csv(cells: Sequence[CellRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CELL_FIELDS)
        for c in cells:
            w.writerow(
                [c.cell_id, repr(c.location.lat), repr(c.location.lon), repr(c.eirp_dbm),
                 repr(c.antenna_height_m), repr(c.freq_mhz), repr(c.bandwidth_mhz)]
            )
