import math

import numpy as np
import pytest

from hrgat.errors import HierarchyError
from hrgat.graph import (
    HierGraph,
    build_hier_graph,
    gaussian_weight,
    knn_edges,
    knn_lists,
    median_knn_sigma,
    union,
)
from hrgat.tiles import TileId, children, iter_descendants

ROOT = TileId(2373, 2933, 13)


def brute_knn(coords, k):
    # O(n^2) scan with (distance, index) ordering
    n = len(coords)
    out = set()
    for i in range(n):
        d = [(math.dist(coords[i], coords[j]), j) for j in range(n) if j != i]
        for _, j in sorted(d)[:k]:
            out.add((j, i))
            out.add((i, j))
    return out


def test_collinear_k1():
    s, d = knn_edges(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), 1)
    assert set(zip(s.tolist(), d.tolist())) == {(0, 1), (1, 0), (1, 2), (2, 1)}


def test_grid_interior_k4():
    xy = np.array([[x, y] for y in range(3) for x in range(3)], dtype=float)
    nbrs, _ = knn_lists(xy, 4)
    assert sorted(nbrs[4].tolist()) == [1, 3, 5, 7]


def test_ties_break_by_index():
    xy = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    nbrs, _ = knn_lists(xy, 2)
    assert nbrs[0].tolist() == [1, 2]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_knn_matches_brute_force(seed):
    xy = np.random.default_rng(seed).uniform(0, 10, (50, 2))
    s, d = knn_edges(xy, 8)
    assert set(zip(s.tolist(), d.tolist())) == brute_knn(xy, 8)


def test_k_truncated_for_small_levels():
    nbrs, _ = knn_lists(np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]), 8)
    assert nbrs.shape == (3, 2)
    with pytest.raises(ValueError):
        knn_lists(np.zeros((1, 2)), 1)


def test_gaussian_weight_values():
    assert gaussian_weight([0, 0], [0, 0], 2.0) == 1.0
    assert gaussian_weight([0, 0], [2.0, 0], 2.0) == pytest.approx(math.exp(-1), abs=1e-15)
    assert gaussian_weight([0, 0], [0, 4.0], 2.0) == pytest.approx(math.exp(-4), abs=1e-15)
    with pytest.raises(ValueError):
        gaussian_weight([0, 0], [1, 1], 0.0)


def test_median_sigma_on_uniform_grid():
    xy = np.array([[x, y] for y in range(6) for x in range(6)], dtype=float) * 0.7
    assert median_knn_sigma(xy, 1) == pytest.approx(0.7, abs=1e-12)


def _tiles(root=ROOT):
    return {13: [root], 14: children(root), 15: list(iter_descendants(root, 15))}


def test_single_root_hierarchy():
    g = build_hier_graph(_tiles(), k=8)
    assert g.n_nodes == 21
    assert len(g.inter_src) == 2 * 20
    # z13 has one node, so no intra edges there
    assert not np.any(g.zoom[g.intra_src] == 13)
    assert np.all(g.zoom[g.intra_src] == g.zoom[g.intra_dst])
    assert np.all((g.intra_w > 0) & (g.intra_w <= 1))
    par = g.parent_index()
    assert all(g.nodes[par[i]].zoom == g.nodes[i].zoom - 1 for i in range(g.n_nodes) if g.nodes[i].zoom > 13)


def test_weight_symmetry_and_outdegree():
    tiles = {13: [ROOT, TileId(ROOT.x + 1, ROOT.y, 13)]}
    tiles[14] = [c for t in tiles[13] for c in children(t)]
    tiles[15] = [c for t in tiles[14] for c in children(t)]
    g = build_hier_graph(tiles, k=4)
    w = {(s, d): x for s, d, x in zip(g.intra_src.tolist(), g.intra_dst.tolist(), g.intra_w.tolist())}
    assert all(w[(d, s)] == x for (s, d), x in w.items())
    # symmetrized: every node keeps at least its k own picks
    fine = np.flatnonzero(g.zoom == 15)
    outdeg = np.bincount(g.intra_dst, minlength=g.n_nodes)[fine]
    assert outdeg.min() >= 4


def test_missing_parent_rejected():
    t = _tiles()
    t[14] = t[14][1:]
    with pytest.raises(HierarchyError):
        build_hier_graph(t)


def test_ancestor_chains():
    g = build_hier_graph(_tiles())
    ch = g.ancestor_chains()
    fine = np.flatnonzero(g.zoom == 15)
    assert np.all(ch[fine, 0] == 0)
    assert np.all(ch[fine, 2] == fine)
    assert np.all(ch[0] == [0, -1, -1])


def test_deterministic_and_json_roundtrip(tmp_path):
    a = build_hier_graph(_tiles(), city="x")
    b = build_hier_graph(_tiles(), city="x")
    assert np.array_equal(a.intra_src, b.intra_src) and np.array_equal(a.intra_w, b.intra_w)
    a.save(tmp_path / "g.json")
    c = HierGraph.load(tmp_path / "g.json")
    assert c.nodes == a.nodes and np.array_equal(c.intra_w, a.intra_w)
    assert np.array_equal(c.inter_src, a.inter_src) and c.sigma_per_zoom == a.sigma_per_zoom


def test_union_offsets():
    a = build_hier_graph(_tiles(), city="a")
    b = build_hier_graph(_tiles(TileId(10, 10, 13)), city="b")
    u = union([a, b])
    assert u.n_nodes == 42
    assert u.intra_src.min() >= 0 and u.intra_src[len(a.intra_src):].min() >= 21
    assert u.index_of(TileId(10, 10, 13), "b") == 21
