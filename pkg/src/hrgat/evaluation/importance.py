from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def permutation_importance(
    predict: Callable[[np.ndarray], np.ndarray],
    features: np.ndarray,
    targets: np.ndarray,
    eval_idx: np.ndarray,
    feature_names: Sequence[str],
    repeats: int = 10,
    seed: int = 0,
    permute: Callable[[np.random.Generator, int], np.ndarray] | None = None,
) -> list[tuple[str, float]]:
    """Mean increase in MAE on ``eval_idx`` when one column is shuffled across all nodes.

    ``predict`` maps a full feature matrix to per-node predictions. ``permute``
    overrides the shuffling (it receives the RNG and the node count). Results are
    sorted by importance, largest first.
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    eval_idx = np.asarray(eval_idx)
    base = float(np.mean(np.abs(predict(features)[eval_idx] - targets[eval_idx])))
    rng = np.random.default_rng(seed)
    n = len(features)
    out = []
    for f, name in enumerate(feature_names):
        deltas = []
        for _ in range(repeats):
            perm = rng.permutation(n) if permute is None else permute(rng, n)
            shuffled = features.copy()
            shuffled[:, f] = features[perm, f]
            mae = float(np.mean(np.abs(predict(shuffled)[eval_idx] - targets[eval_idx])))
            deltas.append(mae - base)
        out.append((name, float(np.mean(deltas))))
    out.sort(key=lambda kv: (-kv[1], kv[0]))
    return out
