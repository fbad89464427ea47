"""Spatial fold construction: clustering-based CV within a city and leave-one-city-out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..graph import HierGraph


@dataclass
class FoldSpec:
    fold_id: int
    train: np.ndarray
    test: np.ndarray
    kind: str  # "cbcv" | "loco"
    city: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        if np.intersect1d(self.train, self.test).size:
            raise ValueError("train and test nodes overlap")

    def train_mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.train] = True
        return m

    def test_mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.test] = True
        return m

    @property
    def test_cities(self) -> list[str]:
        return sorted(set(self.city[self.test].tolist()))


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, attempts: int = 10):
    """Lloyd's algorithm with k-means++ seeding; returns ``(labels, centers)``.

    A run that ends with an empty cluster is re-seeded, up to ``attempts`` times.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < k:
        raise ValueError(f"cannot form {k} clusters from {len(x)} points")
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        centers = _kmeans_pp(x, k, rng)
        labels = None
        ok = True
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = np.argmin(d2, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            counts = np.bincount(labels, minlength=k)
            if (counts == 0).any():
                ok = False
                break
            centers = np.array([x[labels == c].mean(axis=0) for c in range(k)])
        if ok and (np.bincount(labels, minlength=k) > 0).all():
            return labels, centers
    raise RuntimeError(f"k-means left an empty cluster after {attempts} attempts")


def assign_coarse(graph: HierGraph, fine_labels: dict[int, int], fine_zoom: int) -> np.ndarray:
    """Fold label per node; coarse nodes take the majority label of their fine descendants."""
    labels = np.full(graph.n_nodes, -1, dtype=np.int64)
    for i, lab in fine_labels.items():
        labels[i] = lab
    par = graph.parent_index()
    zoom = graph.zoom
    for z in range(fine_zoom - 1, min(graph.zooms) - 1, -1):
        votes: dict[int, list[int]] = {}
        for i in np.flatnonzero(zoom == z + 1):
            p = par[i]
            if p >= 0 and labels[i] >= 0:
                votes.setdefault(int(p), []).append(int(labels[i]))
        for p, v in votes.items():
            counts = np.bincount(v)
            labels[p] = int(np.argmax(counts))  # ties go to the lower fold id
    return labels


def cbcv_folds(graph: HierGraph, n_folds: int = 5, seed: int = 0, fine_zoom: int | None = None) -> list[FoldSpec]:
    """k-means on fine-zoom tile centroids; each cluster is one test fold."""
    if n_folds < 2:
        raise ValueError("need at least two folds")
    fine_zoom = max(graph.zooms) if fine_zoom is None else fine_zoom
    fine = np.flatnonzero(graph.zoom == fine_zoom)
    labels, _ = kmeans(graph.coords[fine], n_folds, seed=seed)
    node_fold = assign_coarse(graph, dict(zip(fine.tolist(), labels.tolist())), fine_zoom)
    if (node_fold < 0).any():
        # coarse tiles without fine descendants: nearest fine tile decides
        orphan = np.flatnonzero(node_fold < 0)
        d2 = ((graph.coords[orphan, None, :] - graph.coords[None, fine, :]) ** 2).sum(axis=2)
        node_fold[orphan] = labels[np.argmin(d2, axis=1)]
    folds = []
    for f in range(n_folds):
        test = np.flatnonzero(node_fold == f)
        train = np.flatnonzero(node_fold != f)
        folds.append(FoldSpec(f, train, test, "cbcv", graph.city))
    return folds


def loco_split(graph: HierGraph, held_out_city: str) -> FoldSpec:
    cities = sorted(set(graph.city.tolist()))
    if held_out_city not in cities:
        raise ValueError(f"unknown city {held_out_city!r}; have {cities}")
    if len(cities) < 2:
        raise ValueError("leave-one-city-out needs at least two cities")
    test = np.flatnonzero(graph.city == held_out_city)
    train = np.flatnonzero(graph.city != held_out_city)
    return FoldSpec(cities.index(held_out_city), train, test, "loco", graph.city)


def crossing_edges(graph: HierGraph, fold: FoldSpec) -> int:
    """Number of edges (intra or inter) joining a train node to a test node."""
    test = fold.test_mask(graph.n_nodes)
    src = np.concatenate([graph.intra_src, graph.inter_src])
    dst = np.concatenate([graph.intra_dst, graph.inter_dst])
    return int((test[src] != test[dst]).sum())
