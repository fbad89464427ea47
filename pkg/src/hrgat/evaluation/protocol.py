"""Fold runners shared by CBCV and LOCO.

Per fold: features are z-scored and targets (optionally log1p-compressed)
standardized per zoom level using training nodes only; graph models then train on the full graph with test
targets masked out of the loss, and every model is scored on test nodes at the
evaluation zoom, in original target units.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..geodata import apply_norm, fit_norm_stats
from ..model import GraphOps, HRGATParams, forward
from ..pipeline import CityData
from .baselines import baseline_cart, baseline_linear
from .folds import FoldSpec, cbcv_folds, loco_split
from .metrics import FoldMetrics, compute_metrics
from .training import TrainConfig, train

log = logging.getLogger(__name__)

MODELS = ("hrgat", "plain_gat", "linear", "cart")
TARGET_TRANSFORMS = ("none", "log1p")


@dataclass
class PreparedFold:
    features: np.ndarray
    targets: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray
    norm_stats: dict[int, dict[str, np.ndarray]]
    target_stats: dict[int, tuple[float, float]]
    target_transform: str = "none"

    def unscale(self, pred: np.ndarray, zoom: np.ndarray) -> np.ndarray:
        out = np.empty_like(pred)
        for z, (mu, sd) in self.target_stats.items():
            m = zoom == z
            out[m] = pred[m] * sd + mu
        if self.target_transform == "log1p":
            out = np.expm1(out)
        return out


@dataclass
class FoldResult:
    fold_id: int
    kind: str
    test_cities: list[str]
    metrics: dict[str, FoldMetrics]
    per_zoom: dict[str, dict[int, FoldMetrics]] = field(default_factory=dict)
    residuals: dict[str, np.ndarray] = field(default_factory=dict)
    histories: dict[str, list[float]] = field(default_factory=dict)
    params: dict[str, HRGATParams] = field(default_factory=dict)
    prepared: PreparedFold | None = None


def prepare_fold(data: CityData, fold: FoldSpec, target_transform: str = "none") -> PreparedFold:
    if target_transform not in TARGET_TRANSFORMS:
        raise ValueError(f"unknown target transform {target_transform!r}")
    n = data.graph.n_nodes
    zoom = data.zoom
    train_mask = fold.train_mask(n)
    test_mask = fold.test_mask(n)
    feats = np.zeros_like(data.features)
    raw = np.log1p(data.targets) if target_transform == "log1p" else data.targets
    targets = np.zeros_like(raw)
    norm_stats, target_stats = {}, {}
    for z in np.unique(zoom):
        at_z = np.flatnonzero(zoom == z)
        train_z = at_z[train_mask[at_z]]
        if len(train_z) == 0:
            raise ValueError(f"no training nodes at zoom {z}")
        stats = fit_norm_stats(data.features, train_z)
        feats[at_z] = apply_norm(data.features[at_z], stats)
        norm_stats[int(z)] = stats
        y = raw[train_z]
        mu, sd = float(y.mean()), float(y.std())
        sd = sd if sd > 1e-12 else 1.0
        targets[at_z] = (raw[at_z] - mu) / sd
        target_stats[int(z)] = (mu, sd)
    return PreparedFold(feats, targets, train_mask, test_mask, norm_stats, target_stats, target_transform)


def run_fold(
    data: CityData,
    fold: FoldSpec,
    config: TrainConfig,
    models=MODELS,
    eval_zoom: int = 15,
    keep_params: bool = False,
) -> FoldResult:
    prep = prepare_fold(data, fold, config.target_transform)
    zoom = data.zoom
    fine = zoom == eval_zoom
    test_eval = np.flatnonzero(prep.test_mask & fine)
    train_fine = np.flatnonzero(prep.train_mask & fine)
    y_true = data.targets[test_eval]
    result = FoldResult(fold.fold_id, fold.kind, fold.test_cities, {}, prepared=prep)

    def score(name, pred_eval, pred_all=None):
        result.metrics[name] = compute_metrics(y_true, pred_eval)
        result.residuals[name] = pred_eval - y_true
        if pred_all is not None:
            per = {}
            for z in np.unique(zoom):
                idx = np.flatnonzero(prep.test_mask & (zoom == z))
                if len(idx) >= 2:
                    per[int(z)] = compute_metrics(data.targets[idx], pred_all[idx])
            result.per_zoom[name] = per

    if "hrgat" in models:
        ops = GraphOps(data.graph, hierarchical=True)
        tr = train(ops, prep.features, prep.targets, config, mask=prep.train_mask)
        pred = prep.unscale(forward(ops, prep.features, tr.params), zoom)
        score("hrgat", pred[test_eval], pred)
        result.histories["hrgat"] = tr.history
        if keep_params:
            result.params["hrgat"] = tr.params

    if "plain_gat" in models:
        sub_idx = np.flatnonzero(fine)
        sub = data.graph.subgraph(sub_idx, include_inter=False)
        ops = GraphOps(sub, hierarchical=False)
        tr = train(ops, prep.features[sub_idx], prep.targets[sub_idx], config, mask=prep.train_mask[sub_idx])
        pred_sub = forward(ops, prep.features[sub_idx], tr.params)
        pred = np.full(data.graph.n_nodes, np.nan)
        pred[sub_idx] = pred_sub
        pred = prep.unscale(np.nan_to_num(pred), zoom)
        score("plain_gat", pred[test_eval])
        result.histories["plain_gat"] = tr.history
        if keep_params:
            result.params["plain_gat"] = tr.params

    # baselines fit the same scaled targets as the graph models
    x_train, y_train = prep.features[train_fine], prep.targets[train_fine]
    z_eval = zoom[test_eval]
    if "linear" in models:
        score("linear", prep.unscale(baseline_linear(x_train, y_train, prep.features[test_eval]), z_eval))
    if "cart" in models:
        score("cart", prep.unscale(baseline_cart(x_train, y_train, prep.features[test_eval]), z_eval))
    return result


def _run_fold_job(args):
    data, fold, config, models, eval_zoom = args
    return run_fold(data, fold, config, models, eval_zoom)


def run_folds(data: CityData, folds, config: TrainConfig, models=MODELS, eval_zoom=15, jobs: int = 1):
    """Run folds independently; fold ``f`` trains from seed ``config.seed + f.fold_id``."""
    args = [(data, f, replace(config, seed=config.seed + f.fold_id), models, eval_zoom) for f in folds]
    if jobs <= 1:
        return [_run_fold_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_fold_job, args))


def run_cbcv(data: CityData, config: TrainConfig, n_folds: int = 5, seed: int = 0, models=MODELS,
             eval_zoom: int = 15, jobs: int = 1) -> list[FoldResult]:
    folds = cbcv_folds(data.graph, n_folds, seed=seed, fine_zoom=eval_zoom)
    return run_folds(data, folds, config, models, eval_zoom, jobs)


def run_loco(data: CityData, held_out: str, config: TrainConfig, models=MODELS, eval_zoom: int = 15) -> FoldResult:
    return run_fold(data, loco_split(data.graph, held_out), config, models, eval_zoom)


def leakage_audit(data: CityData, fold: FoldSpec, config: TrainConfig, seed: int = 0) -> dict[str, bool]:
    """Retrain after scrambling every test-node target; training must not notice."""
    rng = np.random.default_rng(seed)
    mutated = CityData(data.name, data.graph, data.features, data.targets.copy(), data.feature_names)
    mutated.targets[fold.test] = rng.normal(1e3, 1e2, size=len(fold.test))
    a = run_fold(data, fold, config, models=("hrgat", "plain_gat"))
    b = run_fold(mutated, fold, config, models=("hrgat", "plain_gat"))
    same_hist = all(a.histories[m] == b.histories[m] for m in a.histories)
    same_norm = all(
        np.array_equal(a.prepared.norm_stats[z][k], b.prepared.norm_stats[z][k])
        for z in a.prepared.norm_stats
        for k in ("mean", "std")
    ) and a.prepared.target_stats == b.prepared.target_stats
    return {"loss_history_unchanged": same_hist, "norm_stats_unchanged": same_norm}
