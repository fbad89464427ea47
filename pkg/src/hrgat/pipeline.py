"""Glue between stages: features, proxy targets and graph for one city."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geodata import FeatureSource, FeatureTable, build_feature_table
from .graph import HierGraph, build_hier_graph, union
from .propagation import DEFAULT_RX_SENSITIVITY_DBM, CellRecord, build_coverage_map
from .proxy import (
    CellTrafficSeries,
    OlsReport,
    ProxyTable,
    aggregate_up,
    allocate_bandwidth,
    allocate_traffic,
    ols_validate,
    peak_hour_throughput,
)
from .tiles import BBox

ZOOMS = (13, 14, 15)


@dataclass
class CityData:
    """Graph-aligned raw features and targets for one or more cities."""

    name: str
    graph: HierGraph
    features: np.ndarray
    targets: np.ndarray
    feature_names: list[str]

    @property
    def zoom(self) -> np.ndarray:
        return self.graph.zoom


def city_features(sources: Sequence[FeatureSource], bbox: BBox, zooms=ZOOMS) -> dict[int, FeatureTable]:
    return build_feature_table(sources, bbox, zooms)


def city_proxy(
    cells: Sequence[CellRecord],
    traffic: Mapping[str, CellTrafficSeries],
    tiles_by_zoom: Mapping[int, Sequence],
    rx_sensitivity_dbm: float = DEFAULT_RX_SENSITIVITY_DBM,
    mobile_height_m: float = 1.5,
) -> dict[int, ProxyTable]:
    """Coverage and allocation at the finest zoom, summed up to coarser zooms."""
    zooms = sorted(tiles_by_zoom)
    fine = list(tiles_by_zoom[zooms[-1]])
    cov = build_coverage_map(cells, fine, rx_sensitivity_dbm, mobile_height_m)
    covered = [c for c in cells if c.cell_id in cov.tiles_of]
    peaks = {c.cell_id: peak_hour_throughput(traffic[c.cell_id]) for c in covered if c.cell_id in traffic}
    tr = allocate_traffic(peaks, cov, fine)
    bw = allocate_bandwidth(covered, cov, fine)
    out = {zooms[-1]: ProxyTable(fine, tr, bw)}
    for z in zooms[:-1]:
        coarse = list(tiles_by_zoom[z])
        out[z] = ProxyTable(coarse, aggregate_up(tr, fine, coarse), aggregate_up(bw, fine, coarse))
    return out


def validate_proxy(table: ProxyTable) -> OlsReport:
    """Regress allocated traffic on allocated bandwidth over covered tiles."""
    covered = table.bandwidth_mhz > 0
    return ols_validate(table.bandwidth_mhz[covered], table.traffic_mbps[covered])


def assemble_city(
    name: str,
    tables: Mapping[int, FeatureTable],
    proxies: Mapping[int, ProxyTable],
    k: int = 8,
    sigma_policy="median_knn",
) -> CityData:
    zooms = sorted(tables)
    graph = build_hier_graph({z: tables[z].tiles for z in zooms}, k=k, sigma_policy=sigma_policy, city=name)
    rows, targets = [], []
    for z in zooms:
        ptab = proxies[z]
        if list(ptab.tiles) != list(tables[z].tiles):
            pos = {t: i for i, t in enumerate(ptab.tiles)}
            bw = np.array([ptab.bandwidth_mhz[pos[t]] for t in tables[z].tiles])
        else:
            bw = ptab.bandwidth_mhz
        rows.append(tables[z].features)
        targets.append(bw)
    return CityData(name, graph, np.vstack(rows), np.concatenate(targets), list(tables[zooms[0]].feature_names))


def combine(cities: Sequence[CityData]) -> CityData:
    names = cities[0].feature_names
    for c in cities[1:]:
        if c.feature_names != names:
            raise ValueError(f"feature columns of {c.name} differ from {cities[0].name}")
    return CityData(
        "+".join(c.name for c in cities),
        union([c.graph for c in cities]),
        np.vstack([c.features for c in cities]),
        np.concatenate([c.targets for c in cities]),
        list(names),
    )
