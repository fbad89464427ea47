"""Hierarchical multi-resolution tile graph: k-NN edges within a zoom, parent edges across zooms."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import HierarchyError
from .tiles import TileId, parent, quadkey_to_tile, tile_center

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
DEFAULT_K = 8


def project_km(lats, lons, ref_lat: float) -> np.ndarray:
    """Equirectangular projection to kilometres at ``ref_lat``."""
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    x = EARTH_RADIUS_KM * np.radians(lons) * math.cos(math.radians(ref_lat))
    y = EARTH_RADIUS_KM * np.radians(lats)
    return np.column_stack([x, y])


def gaussian_weight(s_i, s_j, sigma: float):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d2 = np.sum((np.asarray(s_i, dtype=float) - np.asarray(s_j, dtype=float)) ** 2, axis=-1)
    return np.exp(-d2 / sigma**2)


def knn_lists(coords: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Each node's k nearest other nodes, ordered by (distance, index).

    Returns ``(neighbors, distances)`` of shape (n, k_eff).
    """
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2:
        raise ValueError("k-NN needs at least two nodes")
    if k >= n:
        log.warning("k=%d truncated to %d for a level with %d nodes", k, n - 1, n)
        k = n - 1
    tree = cKDTree(coords)
    dist, _ = tree.query(coords, k=k + 1)
    kth = dist[:, -1]
    nbrs = np.empty((n, k), dtype=np.int64)
    dists = np.empty((n, k))
    for i in range(n):
        # every candidate at or inside the k-th distance, so ties resolve by index
        cand = np.asarray(tree.query_ball_point(coords[i], kth[i] * (1 + 1e-12) + 1e-15), dtype=np.int64)
        cand = cand[cand != i]
        d = np.sqrt(((coords[cand] - coords[i]) ** 2).sum(axis=1))
        order = np.lexsort((cand, d))[:k]
        nbrs[i] = cand[order]
        dists[i] = d[order]
    return nbrs, dists


def knn_edges(coords: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrized k-NN edge list ``(src, dst)``, sorted by (dst, src)."""
    nbrs, _ = knn_lists(coords, k)
    n = len(nbrs)
    src = nbrs.ravel()
    dst = np.repeat(np.arange(n), nbrs.shape[1])
    pairs = np.unique(np.concatenate([np.column_stack([src, dst]), np.column_stack([dst, src])]), axis=0)
    order = np.lexsort((pairs[:, 0], pairs[:, 1]))
    pairs = pairs[order]
    return pairs[:, 0], pairs[:, 1]


def median_knn_sigma(coords: np.ndarray, k: int) -> float:
    _, dists = knn_lists(coords, k)
    return float(np.median(dists[:, -1]))


@dataclass
class HierGraph:
    nodes: list[TileId]
    coords: np.ndarray
    intra_src: np.ndarray
    intra_dst: np.ndarray
    intra_w: np.ndarray
    inter_src: np.ndarray
    inter_dst: np.ndarray
    sigma_per_zoom: dict[int, float] = field(default_factory=dict)
    city: np.ndarray | None = None
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.city is None:
            self.city = np.array([""] * len(self.nodes), dtype=object)
        self._index = {(c, t): i for i, (c, t) in enumerate(zip(self.city, self.nodes))}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def zoom(self) -> np.ndarray:
        return np.array([t.zoom for t in self.nodes], dtype=np.int64)

    @property
    def zooms(self) -> list[int]:
        return sorted({t.zoom for t in self.nodes})

    def index_of(self, t: TileId, city: str = "") -> int:
        return self._index[(city, t)]

    def parent_index(self) -> np.ndarray:
        """Index of each node's parent node, -1 where absent."""
        out = np.full(self.n_nodes, -1, dtype=np.int64)
        # inter edges are stored in both directions; keep child -> parent
        for s, d in zip(self.inter_src, self.inter_dst):
            if self.nodes[d].zoom == self.nodes[s].zoom - 1:
                out[s] = d
        return out

    def ancestor_chains(self) -> np.ndarray:
        """(n, n_zooms) matrix: column z holds the node's ancestor at zooms[z] or -1.

        The node itself sits in its own zoom column; finer columns are -1.
        """
        zooms = self.zooms
        col = {z: i for i, z in enumerate(zooms)}
        par = self.parent_index()
        chains = np.full((self.n_nodes, len(zooms)), -1, dtype=np.int64)
        for i, t in enumerate(self.nodes):
            j, z = i, t.zoom
            chains[i, col[z]] = i
            while z > zooms[0]:
                j = par[j]
                if j < 0:
                    raise HierarchyError(f"broken ancestor chain at {self.nodes[i]}")
                z -= 1
                chains[i, col[z]] = j
        return chains

    def message_edges(self, include_inter: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(src, dst, weight) including one self-loop per node, sorted by (dst, src)."""
        n = self.n_nodes
        parts_s = [self.intra_src, np.arange(n)]
        parts_d = [self.intra_dst, np.arange(n)]
        parts_w = [self.intra_w, np.ones(n)]
        if include_inter:
            parts_s.append(self.inter_src)
            parts_d.append(self.inter_dst)
            parts_w.append(np.ones(len(self.inter_src)))
        src = np.concatenate(parts_s).astype(np.int64)
        dst = np.concatenate(parts_d).astype(np.int64)
        w = np.concatenate(parts_w).astype(float)
        order = np.lexsort((src, dst))
        return src[order], dst[order], w[order]

    def subgraph(self, keep: np.ndarray, include_inter: bool = True) -> "HierGraph":
        """Induced subgraph on the boolean/int selection ``keep`` (original order kept)."""
        keep_idx = np.flatnonzero(keep) if np.asarray(keep).dtype == bool else np.sort(np.asarray(keep))
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[keep_idx] = np.arange(len(keep_idx))
        m = (remap[self.intra_src] >= 0) & (remap[self.intra_dst] >= 0)
        if include_inter:
            mi = (remap[self.inter_src] >= 0) & (remap[self.inter_dst] >= 0)
        else:
            mi = np.zeros(len(self.inter_src), dtype=bool)
        zooms = {self.nodes[i].zoom for i in keep_idx}
        return HierGraph(
            nodes=[self.nodes[i] for i in keep_idx],
            coords=self.coords[keep_idx],
            intra_src=remap[self.intra_src[m]],
            intra_dst=remap[self.intra_dst[m]],
            intra_w=self.intra_w[m],
            inter_src=remap[self.inter_src[mi]],
            inter_dst=remap[self.inter_dst[mi]],
            sigma_per_zoom={z: s for z, s in self.sigma_per_zoom.items() if z in zooms},
            city=self.city[keep_idx],
        )

    def zoom_subgraph(self, zoom: int) -> "HierGraph":
        return self.subgraph(self.zoom == zoom, include_inter=False)

    # --- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        nodes = [
            {"quadkey": t.quadkey, "zoom": t.zoom, "x_km": float(c[0]), "y_km": float(c[1]), "city": str(city)}
            for t, c, city in zip(self.nodes, self.coords, self.city)
        ]
        edges = [
            {"src": int(s), "dst": int(d), "weight": float(w), "kind": "intra"}
            for s, d, w in zip(self.intra_src, self.intra_dst, self.intra_w)
        ] + [
            {"src": int(s), "dst": int(d), "weight": 1.0, "kind": "inter"}
            for s, d in zip(self.inter_src, self.inter_dst)
        ]
        return {
            "nodes": nodes,
            "edges": edges,
            "sigma_per_zoom": {str(z): s for z, s in self.sigma_per_zoom.items()},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "HierGraph":
        nodes = [quadkey_to_tile(n["quadkey"]) for n in doc["nodes"]]
        coords = np.array([[n["x_km"], n["y_km"]] for n in doc["nodes"]], dtype=float).reshape(-1, 2)
        city = np.array([n.get("city", "") for n in doc["nodes"]], dtype=object)
        intra = [e for e in doc["edges"] if e["kind"] == "intra"]
        inter = [e for e in doc["edges"] if e["kind"] == "inter"]
        return cls(
            nodes=nodes,
            coords=coords,
            intra_src=np.array([e["src"] for e in intra], dtype=np.int64),
            intra_dst=np.array([e["dst"] for e in intra], dtype=np.int64),
            intra_w=np.array([e["weight"] for e in intra], dtype=float),
            inter_src=np.array([e["src"] for e in inter], dtype=np.int64),
            inter_dst=np.array([e["dst"] for e in inter], dtype=np.int64),
            sigma_per_zoom={int(z): float(s) for z, s in doc.get("sigma_per_zoom", {}).items()},
            city=city,
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "HierGraph":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def build_hier_graph(
    tiles_by_zoom: Mapping[int, Sequence[TileId]],
    k: int = DEFAULT_K,
    sigma_policy: str | float | Mapping[int, float] = "median_knn",
    ref_lat: float | None = None,
    city: str = "",
) -> HierGraph:
    zooms = sorted(tiles_by_zoom)
    for z in zooms:
        if not tiles_by_zoom[z]:
            raise ValueError(f"no tiles at zoom {z}")
    nodes = [t for z in zooms for t in tiles_by_zoom[z]]
    centers = [tile_center(t) for t in nodes]
    lats = np.array([c.lat for c in centers])
    lons = np.array([c.lon for c in centers])
    if ref_lat is None:
        ref_lat = float(lats.mean())
    coords = project_km(lats, lons, ref_lat)
    zoom_arr = np.array([t.zoom for t in nodes])
    index = {t: i for i, t in enumerate(nodes)}

    src_parts, dst_parts, w_parts = [], [], []
    sigmas: dict[int, float] = {}
    for z in zooms:
        idx = np.flatnonzero(zoom_arr == z)
        if len(idx) < 2:
            continue
        c = coords[idx]
        if isinstance(sigma_policy, str):
            if sigma_policy != "median_knn":
                raise ValueError(f"unknown sigma policy {sigma_policy!r}")
            sigma = median_knn_sigma(c, k)
        elif isinstance(sigma_policy, Mapping):
            sigma = float(sigma_policy[z])
        else:
            sigma = float(sigma_policy)
        sigmas[z] = sigma
        s, d = knn_edges(c, k)
        src_parts.append(idx[s])
        dst_parts.append(idx[d])
        w_parts.append(gaussian_weight(c[s], c[d], sigma))

    inter_s, inter_d = [], []
    for z in zooms[1:]:
        for t in tiles_by_zoom[z]:
            p = parent(t)
            if p not in index:
                raise HierarchyError(f"parent {p} of {t} missing from zoom {z - 1}")
            inter_s += [index[t], index[p]]
            inter_d += [index[p], index[t]]

    cat = lambda parts, dtype: np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)  # noqa: E731
    return HierGraph(
        nodes=nodes,
        coords=coords,
        intra_src=cat(src_parts, np.int64),
        intra_dst=cat(dst_parts, np.int64),
        intra_w=cat(w_parts, float),
        inter_src=np.array(inter_s, dtype=np.int64),
        inter_dst=np.array(inter_d, dtype=np.int64),
        sigma_per_zoom=sigmas,
        city=np.array([city] * len(nodes), dtype=object),
    )


def union(graphs: Sequence[HierGraph]) -> HierGraph:
    """Disjoint union of per-city graphs; no edges are added between them."""
    offs = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    return HierGraph(
        nodes=[t for g in graphs for t in g.nodes],
        coords=np.concatenate([g.coords for g in graphs]),
        intra_src=np.concatenate([g.intra_src + o for g, o in zip(graphs, offs)]),
        intra_dst=np.concatenate([g.intra_dst + o for g, o in zip(graphs, offs)]),
        intra_w=np.concatenate([g.intra_w for g in graphs]),
        inter_src=np.concatenate([g.inter_src + o for g, o in zip(graphs, offs)]),
        inter_dst=np.concatenate([g.inter_dst + o for g, o in zip(graphs, offs)]),
        sigma_per_zoom=dict(graphs[0].sigma_per_zoom),
        city=np.concatenate([g.city for g in graphs]),
    )
