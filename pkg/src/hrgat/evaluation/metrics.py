from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class FoldMetrics:
    mae: float
    rmse: float
    r_squared: float | None
    n: int

    @property
    def r2_defined(self) -> bool:
        return self.r_squared is not None


def compute_metrics(y_true, y_pred) -> FoldMetrics:
    """MAE, RMSE and R^2; R^2 is None when ``y_true`` is constant."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in shape")
    if len(y_true) < 2:
        raise ValueError("metrics need at least two values")
    e = y_pred - y_true
    mae = float(np.mean(np.abs(e)))
    rmse = float(math.sqrt(np.mean(e * e)))
    sst = float(((y_true - y_true.mean()) ** 2).sum())
    r2 = None if sst == 0.0 else 1.0 - float((e * e).sum()) / sst
    return FoldMetrics(mae, rmse, r2, len(y_true))


def ecdf(values) -> list[tuple[float, float]]:
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    return [(float(x), (i + 1) / n) for i, x in enumerate(v)]


@dataclass
class MetricsReport:
    folds: list[FoldMetrics]
    median_mae: float
    median_rmse: float
    median_r_squared: float | None
    ecdf: list[tuple[float, float]]
    residual_quartiles: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ecdf"] = [list(p) for p in self.ecdf]
        return d


def summarize(folds: list[FoldMetrics], residuals_by_city: dict[str, np.ndarray] | None = None) -> MetricsReport:
    r2 = [f.r_squared for f in folds if f.r_squared is not None]
    quart = {}
    for city, res in (residuals_by_city or {}).items():
        quart[city] = [float(q) for q in np.percentile(np.abs(res), [25, 50, 75])]
    return MetricsReport(
        folds=folds,
        median_mae=float(np.median([f.mae for f in folds])),
        median_rmse=float(np.median([f.rmse for f in folds])),
        median_r_squared=float(np.median(r2)) if r2 else None,
        ecdf=ecdf([f.rmse for f in folds]),
        residual_quartiles=quart,
    )
