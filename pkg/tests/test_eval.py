import math

import numpy as np
import pytest
from conftest import tiny_city

from hrgat.evaluation.baselines import RegressionTree, baseline_cart, baseline_linear, fit_linear
from hrgat.evaluation.folds import FoldSpec, cbcv_folds, crossing_edges, kmeans, loco_split
from hrgat.evaluation.importance import permutation_importance
from hrgat.evaluation.metrics import compute_metrics, ecdf, summarize
from hrgat.evaluation.protocol import leakage_audit, prepare_fold, run_cbcv, run_loco
from hrgat.evaluation.training import TrainConfig, train
from hrgat.model import GraphOps, forward, init_params
from hrgat.pipeline import combine

FAST = TrainConfig(epochs=15, d_hidden=8, lr=1e-2)


# --- training -----------------------------------------------------------------


def test_zero_learning_rate_keeps_params(city):
    cfg = TrainConfig(lr=0.0, epochs=5, d_hidden=4)
    p0 = init_params(4, 4, 2, 3, seed=0, fine_zoom_bias=cfg.fine_zoom_bias)
    tr = train(city.graph, city.features, city.targets, cfg)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(p0.named_arrays(), tr.params.named_arrays()))
    tr = train(city.graph, city.features, city.targets, TrainConfig(lr=0.0, epochs=5, d_hidden=4, optimizer="sgd"))
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(p0.named_arrays(), tr.params.named_arrays()))


def test_converges_on_realizable_targets(city):
    # targets produced by a teacher network of the same architecture
    teacher = init_params(4, 8, 2, 3, seed=99)
    y = forward(city.graph, city.features, teacher)
    tr = train(city.graph, city.features, y, TrainConfig(lr=1e-2, epochs=500, d_hidden=8, lam=0.0))
    assert tr.history[-1] < 0.01 * tr.history[0]


def test_training_deterministic_and_gamma_on_simplex(city):
    a = train(city.graph, city.features, city.targets, FAST, trace_gamma=True)
    b = train(city.graph, city.features, city.targets, FAST)
    assert a.history == b.history
    for g in a.gamma_trace:
        assert abs(g.sum() - 1.0) < 1e-12 and np.all(g > 0)


def test_unknown_optimizer(city):
    with pytest.raises(ValueError):
        train(city.graph, city.features, city.targets, TrainConfig(optimizer="rmsprop", epochs=1))


# --- folds --------------------------------------------------------------------


def test_kmeans_recovers_separated_groups():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 0.1, (5, 2)), rng.normal(50, 0.1, (5, 2))])
    labels, _ = kmeans(x, 2, seed=3)
    assert len(set(labels[:5])) == 1 and len(set(labels[5:])) == 1 and labels[0] != labels[5]


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 2)), 3)


def test_cbcv_partitions_and_coarse_majority(city):
    folds = cbcv_folds(city.graph, 4, seed=0)
    tests = np.concatenate([f.test for f in folds])
    assert sorted(tests.tolist()) == list(range(city.graph.n_nodes))
    par = city.graph.parent_index()
    zoom = city.graph.zoom
    label = np.empty(city.graph.n_nodes, int)
    for f in folds:
        label[f.test] = f.fold_id
        assert np.intersect1d(f.train, f.test).size == 0
    for p in np.flatnonzero(zoom == 14):
        kids = np.flatnonzero(par == p)
        counts = np.bincount(label[kids], minlength=4)
        assert label[p] == int(np.argmax(counts))


def test_cbcv_folds_are_spatially_separated():
    c = tiny_city()
    g = c.graph
    fine = np.flatnonzero(g.zoom == 15)
    xy = g.coords[fine]

    def gap(test_local):
        m = np.zeros(len(fine), bool)
        m[test_local] = True
        d = np.sqrt(((xy[m][:, None] - xy[~m][None]) ** 2).sum(axis=2))
        return d.min(axis=1).mean()

    pos = {int(n): i for i, n in enumerate(fine)}
    folds = cbcv_folds(g, 4, seed=0)
    cb = np.mean([gap([pos[int(n)] for n in f.test if n in pos]) for f in folds])
    rng = np.random.default_rng(1)
    sizes = [sum(int(n) in pos for n in f.test) for f in folds]
    rnd = np.mean([gap(rng.choice(len(fine), s, replace=False)) for _ in range(100) for s in sizes[:1]])
    assert cb > rnd


def test_loco_split_properties():
    a, b = tiny_city("a"), tiny_city("b", x0=3000, seed=1)
    data = combine([a, b])
    n = data.graph.n_nodes
    seen = []
    for name in ("a", "b"):
        f = loco_split(data.graph, name)
        assert len(f.train) == n - 84 and f.test_cities == [name]
        assert crossing_edges(data.graph, f) == 0
        seen.extend(f.test.tolist())
    assert sorted(seen) == list(range(n))
    with pytest.raises(ValueError):
        loco_split(data.graph, "zzz")
    with pytest.raises(ValueError):
        loco_split(a.graph, "a")


def test_foldspec_rejects_overlap():
    with pytest.raises(ValueError):
        FoldSpec(0, [1, 2], [2, 3], "cbcv", np.array([""] * 4, dtype=object))


# --- metrics and baselines ----------------------------------------------------


def test_metric_examples():
    m = compute_metrics([1, 2, 3], [2, 2, 5])
    assert m.mae == 1.0 and m.rmse == pytest.approx(math.sqrt(5 / 3), abs=1e-15)
    p = compute_metrics([1, 2, 3], [1, 2, 3])
    assert (p.mae, p.rmse, p.r_squared) == (0.0, 0.0, 1.0)
    assert compute_metrics([1, 2, 3], [2, 2, 2]).r_squared == 0.0
    c = compute_metrics([2, 2, 2], [1, 2, 3])
    assert c.r_squared is None and not c.r2_defined and c.mae == pytest.approx(2 / 3)


def test_summary_median_and_ecdf():
    folds = [compute_metrics([0, 1], [e, 1 + e]) for e in (0.5, 0.1, 0.3, 0.9, 0.2)]
    s = summarize(folds, {"x": np.array([-1.0, 2.0, 3.0])})
    assert s.median_mae == pytest.approx(0.3)
    assert [p[1] for p in s.ecdf] == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert [p[0] for p in s.ecdf] == sorted(p[0] for p in s.ecdf)
    assert s.residual_quartiles["x"] == [1.5, 2.0, 2.5]
    assert ecdf([3.0]) == [(3.0, 1.0)]


def test_linear_baseline_exact():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 3))
    y = x @ [1.0, -2.0, 0.5] + 4.0
    assert compute_metrics(y, baseline_linear(x, y, x)).r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit_linear(x, y) == pytest.approx([4.0, 1.0, -2.0, 0.5], abs=1e-8)


def test_cart_step_threshold():
    x = np.arange(20, dtype=float)[:, None]
    y = np.where(x[:, 0] < 7.5, 1.0, 5.0)
    tree = RegressionTree(max_depth=1, min_leaf=1).fit(x, y)
    assert tree.root.threshold == 7.5 and tree.root.feature == 0
    assert tree.predict(x).tolist() == y.tolist()


def test_cart_never_worse_than_mean():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(200, 5)), rng.normal(size=200)
    pred = baseline_cart(x, y, x)
    assert np.mean((pred - y) ** 2) <= np.var(y)


def test_cart_unfitted():
    with pytest.raises(RuntimeError):
        RegressionTree().predict(np.zeros((1, 1)))


# --- importance ---------------------------------------------------------------


def test_importance_identity_permutation_is_zero(city):
    beta = fit_linear(city.features, city.targets)
    imp = permutation_importance(lambda x: beta[0] + x @ beta[1:], city.features, city.targets,
                                 np.arange(city.graph.n_nodes), city.feature_names, repeats=3,
                                 permute=lambda rng, n: np.arange(n))
    assert all(v == 0.0 for _, v in imp)


def test_importance_zero_weight_feature_and_planted_signal(city):
    y = (city.targets - city.targets.mean()) / city.targets.std()
    # weight decay pushes the unused inputs toward zero
    tr = train(city.graph, city.features, y, TrainConfig(lr=1e-2, epochs=400, d_hidden=8, lam=1e-2))
    p = tr.params
    p.layers[0].W[3, :] = 0.0  # feature f3 cannot reach the output
    ops = GraphOps(city.graph)
    imp = dict(permutation_importance(lambda x: forward(ops, x, p), city.features, y,
                                      np.arange(city.graph.n_nodes), city.feature_names, repeats=3, seed=1))
    assert abs(imp["f3"]) < 1e-9
    assert max(imp, key=imp.get) == "f0"


# --- protocols ----------------------------------------------------------------


def test_prepare_fold_uses_train_stats_per_zoom(city):
    fold = cbcv_folds(city.graph, 4, seed=0)[0]
    prep = prepare_fold(city, fold)
    for z, (mu, sd) in prep.target_stats.items():
        tr = fold.train[city.zoom[fold.train] == z]
        assert mu == pytest.approx(city.targets[tr].mean()) and sd == pytest.approx(city.targets[tr].std())
    assert np.allclose(prep.unscale(prep.targets, city.zoom), city.targets)
    lp = prepare_fold(city, fold, "log1p")
    assert np.allclose(lp.unscale(lp.targets, city.zoom), city.targets)
    with pytest.raises(ValueError):
        prepare_fold(city, fold, "sqrt")


def test_run_cbcv_and_loco_shapes(city):
    res = run_cbcv(city, FAST, n_folds=3)
    assert len(res) == 3 and all(set(r.metrics) == {"hrgat", "plain_gat", "linear", "cart"} for r in res)
    data = combine([city, tiny_city("b", x0=3000, seed=1)])
    r = run_loco(data, "b", FAST, models=("hrgat", "linear"))
    assert r.test_cities == ["b"] and r.metrics["hrgat"].n == 64


def test_leakage_audit_cbcv_and_loco(city):
    fold = cbcv_folds(city.graph, 3, seed=0)[1]
    assert leakage_audit(city, fold, FAST) == {"loss_history_unchanged": True, "norm_stats_unchanged": True}
    data = combine([city, tiny_city("b", x0=3000, seed=1)])
    assert all(leakage_audit(data, loco_split(data.graph, "tiny"), FAST).values())
