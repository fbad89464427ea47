"""``hrgat`` command line: one subcommand per pipeline stage.

Every stage reads from and writes under ``--out`` (inputs may also come from
``paths.cities_dir``), prints a one-line JSON summary on stdout and logs the
resolved configuration on stderr. Exit codes: 2 missing input, 3 validation
failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import PipelineConfig, load_config
from .errors import DegenerateRegressorError, HierarchyError, NumericalError
from .evaluation.folds import FoldSpec
from .evaluation.importance import permutation_importance
from .evaluation.metrics import FoldMetrics, ecdf, summarize
from .evaluation.protocol import MODELS, FoldResult, prepare_fold, run_cbcv, run_loco
from .evaluation.training import train
from .geodata import build_feature_table, read_feature_csv, write_feature_csv
from .graph import HierGraph, build_hier_graph
from .model import GraphOps, HRGATParams, forward
from .pipeline import CityData, city_proxy, combine, validate_proxy
from .propagation import read_cells_csv
from .proxy import ProxyTable, read_proxy_csv, read_traffic_csv, write_proxy_csv
from .synth import generate_city, load_sources, write_city
from .tiles import BBox, tiles_in_bbox

log = logging.getLogger("hrgat")

EXIT_MISSING, EXIT_VALIDATION, EXIT_NUMERICAL = 2, 3, 4


class MissingInput(Exception):
    def __init__(self, path: Path):
        super().__init__(str(path))
        self.path = path


class ValidationFailure(Exception):
    def __init__(self, invariant: str, detail: str = ""):
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
        self.invariant = invariant


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(path)
    return path


def _dump_json(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Context:
    def __init__(self, cfg: PipelineConfig, out: Path, jobs: int, hold_out: str | None):
        self.cfg, self.out, self.jobs, self.hold_out = cfg, out, jobs, hold_out

    @property
    def cities_dir(self) -> Path:
        d = self.cfg.paths.cities_dir
        return Path(d) if d is not None else self.out / "synth"

    def city_names(self) -> list[str]:
        root = _require(self.cities_dir)
        names = sorted(p.name for p in root.iterdir() if (p / "meta.json").exists())
        if not names:
            raise MissingInput(root / "<city>" / "meta.json")
        return names

    def city_bbox(self, city: str) -> BBox:
        with open(_require(self.cities_dir / city / "meta.json")) as fh:
            return BBox(**json.load(fh)["bbox"])

    def feature_path(self, city: str, z: int) -> Path:
        return self.out / "features" / city / f"z{z}.csv"

    def proxy_path(self, city: str, z: int) -> Path:
        return self.out / "proxy" / city / f"z{z}.csv"

    def graph_path(self, city: str) -> Path:
        return self.out / "graph" / f"{city}.json"

    def load_city(self, city: str) -> CityData:
        """Graph-ordered raw features and bandwidth targets for one city."""
        graph = HierGraph.load(_require(self.graph_path(city)))
        tables = {z: read_feature_csv(_require(self.feature_path(city, z))) for z in self.cfg.zooms}
        proxies = {z: read_proxy_csv(_require(self.proxy_path(city, z))) for z in self.cfg.zooms}
        names = tables[self.cfg.zooms[0]].feature_names
        frow = {t: (z, i) for z, tab in tables.items() for i, t in enumerate(tab.tiles)}
        prow = {t: (z, i) for z, tab in proxies.items() for i, t in enumerate(tab.tiles)}
        feats = np.zeros((graph.n_nodes, len(names)))
        targets = np.zeros(graph.n_nodes)
        for n, t in enumerate(graph.nodes):
            if t not in frow or t not in prow:
                raise ValidationFailure("graph-table-alignment", f"{city}: tile {t.quadkey} missing from tables")
            z, i = frow[t]
            feats[n] = tables[z].features[i]
            z, i = prow[t]
            targets[n] = proxies[z].bandwidth_mhz[i]
        return CityData(city, graph, feats, targets, list(names))


# stages ---------------------------------------------------------------------


def stage_synth(ctx: Context) -> dict:
    cfg = ctx.cfg.synth
    root = ctx.out / "synth"
    for i, c in enumerate(cfg.cities):
        write_city(generate_city(cfg.city_config(i)), root / c.name)
    return {"cities": [c.name for c in cfg.cities], "dir": str(root)}


def stage_features(ctx: Context) -> dict:
    counts = {}
    for city in ctx.city_names():
        bbox, sources, _ = load_sources(ctx.cities_dir / city)
        tables = build_feature_table(sources, bbox, ctx.cfg.zooms)
        for z, tab in tables.items():
            path = ctx.feature_path(city, z)
            path.parent.mkdir(parents=True, exist_ok=True)
            write_feature_csv(tab, path)
        counts[city] = {str(z): len(tab.tiles) for z, tab in tables.items()}
        n_features = len(tables[ctx.cfg.zooms[0]].feature_names)
    return {"tiles": counts, "n_features": n_features}


def stage_proxy(ctx: Context) -> dict:
    totals = {}
    for city in ctx.city_names():
        d = ctx.cities_dir / city
        cells = read_cells_csv(_require(d / "cells.csv"))
        traffic = read_traffic_csv(_require(d / "traffic.csv"))
        bbox = ctx.city_bbox(city)
        tiles = {z: tiles_in_bbox(bbox, z) for z in ctx.cfg.zooms}
        proxies = city_proxy(cells, traffic, tiles, ctx.cfg.rx_sensitivity_dbm, ctx.cfg.mobile_height_m)
        for z, tab in proxies.items():
            path = ctx.proxy_path(city, z)
            path.parent.mkdir(parents=True, exist_ok=True)
            write_proxy_csv(tab, path)
        fine = proxies[ctx.cfg.zooms[-1]]
        totals[city] = {
            "cells": len(cells),
            "traffic_mbps": float(fine.traffic_mbps.sum()),
            "bandwidth_mhz": float(fine.bandwidth_mhz.sum()),
        }
    return {"cities": totals}


def stage_validate_proxy(ctx: Context) -> dict:
    fine = ctx.cfg.zooms[-1]
    reports = {}
    for city in ctx.city_names():
        table: ProxyTable = read_proxy_csv(_require(ctx.proxy_path(city, fine)))
        rep = validate_proxy(table).to_dict()
        _dump_json(rep, ctx.out / "proxy" / city / "ols.json")
        reports[city] = {"r_squared": rep["r_squared"], "p_value": rep["p_value"], "n": rep["n"]}
    return {"ols": reports}


def stage_graph(ctx: Context) -> dict:
    summary = {}
    for city in ctx.city_names():
        tiles = {z: read_feature_csv(_require(ctx.feature_path(city, z))).tiles for z in ctx.cfg.zooms}
        g = build_hier_graph(tiles, k=ctx.cfg.k, sigma_policy=ctx.cfg.sigma(), city=city)
        path = ctx.graph_path(city)
        path.parent.mkdir(parents=True, exist_ok=True)
        g.save(path)
        summary[city] = {"nodes": g.n_nodes, "intra_edges": len(g.intra_src), "inter_edges": len(g.inter_src)}
    return {"graphs": summary}


def _full_fold(data: CityData) -> FoldSpec:
    return FoldSpec(0, np.arange(data.graph.n_nodes), np.zeros(0, dtype=np.int64), "full", data.graph.city)


def stage_train(ctx: Context) -> dict:
    tc = ctx.cfg.train_config()
    summary = {}
    for city in ctx.city_names():
        data = ctx.load_city(city)
        prep = prepare_fold(data, _full_fold(data), tc.target_transform)
        res = train(GraphOps(data.graph, True), prep.features, prep.targets, tc, mask=prep.train_mask)
        d = ctx.out / "train" / city
        d.mkdir(parents=True, exist_ok=True)
        res.params.save(d / "params.json")
        with open(d / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for e, loss in enumerate(res.history):
                w.writerow([e, repr(float(loss))])
        summary[city] = {"final_loss": float(res.history[-1]), "gamma": [float(g) for g in res.params.gamma]}
    return {"trained": summary}


def _metrics_dict(m: FoldMetrics) -> dict:
    return {"mae": m.mae, "rmse": m.rmse, "r_squared": m.r_squared, "n": m.n}


def _model_block(results: list[FoldResult], model: str) -> dict:
    folds = [r.metrics[model] for r in results]
    by_city: dict[str, list[np.ndarray]] = {}
    for r in results:
        by_city.setdefault("+".join(r.test_cities), []).append(r.residuals[model])
    rep = summarize(folds, {c: np.concatenate(v) for c, v in by_city.items()})
    block = {
        "folds": [_metrics_dict(f) for f in folds],
        "median_mae": rep.median_mae,
        "median_rmse": rep.median_rmse,
        "median_r_squared": rep.median_r_squared,
        "ecdf": [list(p) for p in rep.ecdf],
        "residual_quartiles": rep.residual_quartiles,
    }
    if all(model in r.per_zoom for r in results):
        block["per_zoom"] = [{str(z): _metrics_dict(m) for z, m in r.per_zoom[model].items()} for r in results]
    return block


def stage_eval_cbcv(ctx: Context) -> dict:
    cfg, tc = ctx.cfg, ctx.cfg.train_config()
    data = {c: ctx.load_city(c) for c in ctx.city_names()}
    groups = {c: d for c, d in data.items()}
    if cfg.eval.cbcv_mode == "pooled":
        pooled = combine(list(data.values()))
        groups = {pooled.name: pooled}
    doc = {"mode": cfg.eval.cbcv_mode, "n_folds": cfg.eval.n_folds, "groups": {}}
    summary = {}
    for name, d in groups.items():
        results = run_cbcv(d, tc, cfg.eval.n_folds, seed=cfg.eval.fold_seed, eval_zoom=cfg.eval.eval_zoom,
                           jobs=ctx.jobs)
        doc["groups"][name] = {m: _model_block(results, m) for m in MODELS}
        summary[name] = {m: doc["groups"][name][m]["median_mae"] for m in MODELS}
    _dump_json(doc, ctx.out / "eval" / "cbcv.json")
    return {"median_mae": summary}


def stage_eval_loco(ctx: Context) -> dict:
    cities = ctx.city_names()
    held = ctx.hold_out or ctx.cfg.eval.loco_city
    targets = [held] if held else cities
    for c in targets:
        if c not in cities:
            raise ValidationFailure("hold-out-city-known", f"{c!r} not in {cities}")
    pooled = combine([ctx.load_city(c) for c in cities])
    tc = ctx.cfg.train_config()
    summary = {}
    for c in targets:
        r = run_loco(pooled, c, tc, eval_zoom=ctx.cfg.eval.eval_zoom)
        doc = {
            "held_out": c,
            "test_cities": r.test_cities,
            "train_cities": [x for x in cities if x != c],
            "models": {m: _metrics_dict(r.metrics[m]) for m in MODELS},
        }
        _dump_json(doc, ctx.out / "eval" / f"loco_{c}.json")
        summary[c] = {m: r.metrics[m].mae for m in MODELS}
    return {"mae": summary}


def stage_importance(ctx: Context) -> dict:
    tc = ctx.cfg.train_config()
    top = {}
    for city in ctx.city_names():
        data = ctx.load_city(city)
        params = HRGATParams.load(_require(ctx.out / "train" / city / "params.json"))
        prep = prepare_fold(data, _full_fold(data), tc.target_transform)
        ops = GraphOps(data.graph, True)
        zoom = data.zoom

        def predict(x, ops=ops, params=params, prep=prep, zoom=zoom):
            return prep.unscale(forward(ops, x, params), zoom)

        ranked = permutation_importance(
            predict, prep.features, data.targets, np.flatnonzero(zoom == ctx.cfg.eval.eval_zoom),
            data.feature_names, repeats=ctx.cfg.eval.importance_repeats, seed=tc.seed,
        )
        path = ctx.out / "importance" / f"{city}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "delta_mae"])
            for name, delta in ranked:
                w.writerow([name, repr(delta)])
        top[city] = ranked[0][0]
    return {"top_feature": top}


def _read_importance(path: Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {r["feature"]: float(r["delta_mae"]) for r in csv.DictReader(fh)}


def stage_report(ctx: Context) -> dict:
    with open(_require(ctx.out / "eval" / "cbcv.json")) as fh:
        cbcv = json.load(fh)
    rep_dir = ctx.out / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)
    table = {}
    for m in MODELS:
        folds = [FoldMetrics(**f) for g in cbcv["groups"].values() for f in g[m]["folds"]]
        s = summarize(folds)
        table[m] = {"median_mae": s.median_mae, "median_rmse": s.median_rmse, "median_r_squared": s.median_r_squared}
        with open(rep_dir / f"ecdf_{m}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rmse", "cum_fraction"])
            for x, p in ecdf([f.rmse for f in folds]):
                w.writerow([repr(x), repr(p)])
    per_group = {
        g: {m: {k: blk[m][k] for k in ("median_mae", "median_rmse", "median_r_squared")} for m in MODELS}
        for g, blk in cbcv["groups"].items()
    }
    loco = {}
    for p in sorted((ctx.out / "eval").glob("loco_*.json")):
        with open(p) as fh:
            d = json.load(fh)
        loco[d["held_out"]] = {m: d["models"][m]["mae"] for m in MODELS}
    ols = {}
    for p in sorted((ctx.out / "proxy").glob("*/ols.json")):
        with open(p) as fh:
            ols[p.parent.name] = json.load(fh)
    imp_files = sorted((ctx.out / "importance").glob("*.csv"))
    importance = {}
    if imp_files:
        per_city = [_read_importance(p) for p in imp_files]
        names = sorted(per_city[0])
        mean = {n: float(np.mean([pc[n] for pc in per_city])) for n in names}
        importance = dict(sorted(mean.items(), key=lambda kv: (-kv[1], kv[0])))
        with open(rep_dir / "importance.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "delta_mae"])
            for n, v in importance.items():
                w.writerow([n, repr(v)])
    doc = {
        "cbcv_table": table,
        "cbcv_by_group": per_group,
        "loco_mae": loco,
        "proxy_ols": ols,
        "importance_mean": importance,
    }
    _dump_json(doc, rep_dir / "report.json")
    return {"table": table, "loco_rotations": len(loco)}


STAGES = {
    "synth": stage_synth,
    "features": stage_features,
    "proxy": stage_proxy,
    "validate-proxy": stage_validate_proxy,
    "graph": stage_graph,
    "train": stage_train,
    "eval-cbcv": stage_eval_cbcv,
    "eval-loco": stage_eval_loco,
    "importance": stage_importance,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrgat", description="Hierarchical GAT spectrum-demand pipeline")
    p.add_argument("stage", choices=list(STAGES))
    p.add_argument("--config", type=Path, default=None, help="JSON pipeline config (defaults used if omitted)")
    p.add_argument("--out", type=Path, required=True, help="output directory; every artifact lands here")
    p.add_argument("--seed", type=int, default=None, help="override training and synthesis seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds in eval stages")
    p.add_argument("--hold-out", dest="hold_out", default=None, help="city held out by eval-loco")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            _require(args.config)
        try:
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
        except json.JSONDecodeError as exc:
            raise ValidationFailure("config-json", str(exc)) from exc
        except ValidationError as exc:
            raise ValidationFailure("config-schema", str(exc).splitlines()[0]) from exc
        if args.jobs < 1:
            raise ValidationFailure("jobs-positive", str(args.jobs))
        args.out.mkdir(parents=True, exist_ok=True)
        resolved = cfg.dumps()
        log.info("resolved config:\n%s", resolved)
        with open(args.out / "config.resolved.json", "w") as fh:
            fh.write(resolved + "\n")
        summary = STAGES[args.stage](Context(cfg, args.out, args.jobs, args.hold_out))
    except MissingInput as exc:
        print(f"missing input: {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except ValidationFailure as exc:
        print(f"validation failure [{exc.invariant}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except HierarchyError as exc:
        print(f"validation failure [hierarchy-closure]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DegenerateRegressorError as exc:
        print(f"validation failure [nonconstant-regressor]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps({"stage": args.stage, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
