"""Non-graph baselines: least-squares linear model and a CART regression tree."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError

RIDGE_JITTER = 1e-8


def fit_linear(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Coefficients ``[intercept, w_1..w_p]`` from the jittered normal equations."""
    x = np.asarray(x, dtype=float)
    X = np.column_stack([np.ones(len(x)), x])
    gram = X.T @ X + RIDGE_JITTER * np.eye(X.shape[1])
    try:
        beta = np.linalg.solve(gram, X.T @ np.asarray(y, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular normal equations: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise NumericalError("non-finite linear coefficients")
    return beta


def predict_linear(beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    return beta[0] + np.asarray(x, dtype=float) @ beta[1:]


def baseline_linear(train_x, train_y, test_x) -> np.ndarray:
    return predict_linear(fit_linear(train_x, train_y), test_x)


@dataclass
class _Node:
    value: float
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class RegressionTree:
    """Variance-reduction CART with exhaustive midpoint thresholds."""

    def __init__(self, max_depth: int = 8, min_leaf: int = 5):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.root: _Node | None = None

    def fit(self, x, y) -> "RegressionTree":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self.root = self._grow(x, y, 0)
        return self

    def _best_split(self, x, y):
        n = len(y)
        parent_sse = float(((y - y.mean()) ** 2).sum())
        best = (parent_sse, -1, 0.0)
        for f in range(x.shape[1]):
            order = np.argsort(x[:, f], kind="stable")
            xs, ys = x[order, f], y[order]
            csum = np.cumsum(ys)
            csq = np.cumsum(ys * ys)
            # split after position i (left = first i+1 rows)
            i = np.arange(self.min_leaf - 1, n - self.min_leaf)
            if len(i) == 0:
                continue
            valid = xs[i] < xs[i + 1]
            i = i[valid]
            if len(i) == 0:
                continue
            nl = i + 1.0
            nr = n - nl
            sl, sr = csum[i], csum[-1] - csum[i]
            ql, qr = csq[i], csq[-1] - csq[i]
            sse = (ql - sl * sl / nl) + (qr - sr * sr / nr)
            j = int(np.argmin(sse))
            if sse[j] < best[0] - 1e-12 * max(parent_sse, 1.0):
                best = (float(sse[j]), f, 0.5 * (xs[i[j]] + xs[i[j] + 1]))
        return best

    def _grow(self, x, y, depth) -> _Node:
        node = _Node(float(y.mean()))
        if depth >= self.max_depth or len(y) < 2 * self.min_leaf:
            return node
        _, f, thr = self._best_split(x, y)
        if f < 0:
            return node
        left = x[:, f] <= thr
        node.feature, node.threshold = f, thr
        node.left = self._grow(x[left], y[left], depth + 1)
        node.right = self._grow(x[~left], y[~left], depth + 1)
        return node

    def predict(self, x) -> np.ndarray:
        if self.root is None:
            raise RuntimeError("tree is not fitted")
        x = np.asarray(x, dtype=float)
        out = np.empty(len(x))
        for r, row in enumerate(x):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[r] = node.value
        return out


def baseline_cart(train_x, train_y, test_x, max_depth: int = 8, min_leaf: int = 5) -> np.ndarray:
    return RegressionTree(max_depth, min_leaf).fit(train_x, train_y).predict(test_x)
