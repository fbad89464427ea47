"""Spectrum-demand proxy: peak-hour traffic, per-tile allocation and OLS validation."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateRegressorError
from .propagation import CellRecord, CoverageMap
from .tiles import TileId, ancestor, quadkey_to_tile


@dataclass
class CellTrafficSeries:
    """Hourly downlink throughput of one cell as (day, hour, mbps) triples."""

    cell_id: str
    days: np.ndarray
    hours: np.ndarray
    dl_throughput_mbps: np.ndarray

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=np.int64)
        self.hours = np.asarray(self.hours, dtype=np.int64)
        self.dl_throughput_mbps = np.asarray(self.dl_throughput_mbps, dtype=float)
        n = len(self.days)
        if len(self.hours) != n or len(self.dl_throughput_mbps) != n:
            raise ValueError(f"{self.cell_id}: ragged observation arrays")
        if n and (self.hours.min() < 0 or self.hours.max() > 23):
            raise ValueError(f"{self.cell_id}: hour outside 0..23")
        if n and (self.dl_throughput_mbps < 0).any():
            raise ValueError(f"{self.cell_id}: negative throughput")
        if n and len(set(zip(self.days.tolist(), self.hours.tolist()))) != n:
            raise ValueError(f"{self.cell_id}: duplicate (day, hour) observation")


@dataclass
class ProxyTable:
    tiles: list[TileId]
    traffic_mbps: np.ndarray
    bandwidth_mhz: np.ndarray


@dataclass
class OlsReport:
    slope: float
    intercept: float
    r_squared: float
    f_statistic: float
    p_value: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def peak_hour_throughput(series: CellTrafficSeries) -> float:
    """Mean over observed days of the daily maximum hourly throughput."""
    if len(series.days) == 0:
        raise ValueError(f"{series.cell_id}: empty traffic series")
    order = np.lexsort((series.hours, series.days))
    days = series.days[order]
    vals = series.dl_throughput_mbps[order]
    starts = np.flatnonzero(np.r_[True, days[1:] != days[:-1]])
    daily_max = np.maximum.reduceat(vals, starts)
    # correctly rounded sum, so the result does not depend on day order
    return math.fsum(daily_max.tolist()) / len(daily_max)


def _allocate(per_cell: Mapping[str, float], cov: CoverageMap, tiles: Sequence[TileId]) -> np.ndarray:
    pos = {t: i for i, t in enumerate(tiles)}
    out = np.zeros(len(tiles))
    for cid, value in per_cell.items():
        if cid not in cov.tiles_of:
            raise ValueError(f"cell {cid} missing from coverage map")
        covered = cov.tiles_of[cid]
        if not covered:
            raise RuntimeError(f"cell {cid} covers no tile")
        share = value / len(covered)
        for t in covered:
            if t in pos:
                out[pos[t]] += share
    return out


def allocate_traffic(peaks: Mapping[str, float], cov: CoverageMap, tiles: Sequence[TileId]) -> np.ndarray:
    """T_grid(g) = sum over covering cells of peak / (number of tiles the cell covers)."""
    return _allocate(peaks, cov, tiles)


def allocate_bandwidth(cells: Iterable[CellRecord], cov: CoverageMap, tiles: Sequence[TileId]) -> np.ndarray:
    return _allocate({c.cell_id: c.bandwidth_mhz for c in cells if c.cell_id in cov.tiles_of}, cov, tiles)


def aggregate_up(values: np.ndarray, fine: Sequence[TileId], coarse: Sequence[TileId]) -> np.ndarray:
    """Sum fine-zoom values into their ancestors at the coarse zoom."""
    pos = {t: i for i, t in enumerate(coarse)}
    zoom = coarse[0].zoom
    out = np.zeros(len(coarse))
    for t, v in zip(fine, values):
        a = ancestor(t, zoom)
        if a in pos:
            out[pos[a]] += v
    return out


# --- regularized incomplete beta -------------------------------------------

_CF_TOL = 1e-12
_CF_MAX_ITER = 500
_TINY = 1e-300


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def f_survival(f: float, d1: float, d2: float) -> float:
    """P(F > f) for the F(d1, d2) distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc_regularized(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


def ols_validate(x, y) -> OlsReport:
    """Simple linear regression y ~ a + b x with an F(1, n-2) significance test."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n != len(y):
        raise ValueError("x and y differ in length")
    if n < 3:
        raise ValueError("OLS validation needs at least 3 points")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise DegenerateRegressorError("proxy values are constant")
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    sse = float((resid**2).sum())
    sst = float(((y - ym) ** 2).sum())
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    if sse == 0.0:
        f_stat, p = math.inf, 0.0
    else:
        f_stat = (sst - sse) / (sse / (n - 2))
        p = f_survival(f_stat, 1, n - 2)
    return OlsReport(slope, intercept, r2, f_stat, p, n)


# --- file formats ---------------------------------------------------------


def read_traffic_csv(path: str | Path) -> dict[str, CellTrafficSeries]:
    cols: dict[str, list[list]] = defaultdict(lambda: [[], [], []])
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"cell_id", "day", "hour", "dl_throughput_mbps"}
        if not need <= set(reader.fieldnames or []):
            raise ValueError(f"{path}: missing columns {sorted(need - set(reader.fieldnames or []))}")
        for row in reader:
            c = cols[row["cell_id"]]
            c[0].append(int(row["day"]))
            c[1].append(int(row["hour"]))
            c[2].append(float(row["dl_throughput_mbps"]))
    return {cid: CellTrafficSeries(cid, *v) for cid, v in cols.items()}


def write_traffic_csv(series: Iterable[CellTrafficSeries], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "day", "hour", "dl_throughput_mbps"])
        for s in series:
            for d, h, v in zip(s.days, s.hours, s.dl_throughput_mbps):
                w.writerow([s.cell_id, int(d), int(h), repr(float(v))])


def write_proxy_csv(table: ProxyTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quadkey", "traffic_mbps", "bandwidth_mhz"])
        for t, tr, bw in zip(table.tiles, table.traffic_mbps, table.bandwidth_mhz):
            w.writerow([t.quadkey, repr(float(tr)), repr(float(bw))])


def read_proxy_csv(path: str | Path) -> ProxyTable:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ProxyTable(
        [quadkey_to_tile(r["quadkey"]) for r in rows],
        np.array([float(r["traffic_mbps"]) for r in rows]),
        np.array([float(r["bandwidth_mhz"]) for r in rows]),
    )
