"""Hierarchical-resolution GAT: forward pass, loss and reverse-mode gradients.

Everything is vectorized over the edge list. Edges carry messages ``src -> dst``
and are kept sorted by ``dst`` so a node's neighbourhood is one contiguous block.
Each node has a self-loop of weight 1; inter-zoom edges also carry weight 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError
from .graph import HierGraph

LEAKY_SLOPE = 0.2


@dataclass
class GATLayerParams:
    W: np.ndarray  # (d_in, d_out)
    a: np.ndarray  # (2 * d_out,): [target half, source half]
    b: np.ndarray  # (d_out,)


@dataclass
class HRGATParams:
    layers: list[GATLayerParams]
    zoom_logits: np.ndarray  # one per zoom level, coarse to fine
    head_w: np.ndarray  # (d_hidden,)
    head_b: np.ndarray = field(default_factory=lambda: np.zeros(1))
    slope: float = LEAKY_SLOPE

    @property
    def gamma(self) -> np.ndarray:
        return softmax(self.zoom_logits)

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.W", layer.W
            yield f"layers.{i}.a", layer.a
            yield f"layers.{i}.b", layer.b
        yield "zoom_logits", self.zoom_logits
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def regularized_names(self) -> set[str]:
        """Weights under the L2 penalty: W, a and head weights (no biases, no zoom logits)."""
        names = {"head_w"}
        for i in range(len(self.layers)):
            names |= {f"layers.{i}.W", f"layers.{i}.a"}
        return names

    def copy(self) -> "HRGATParams":
        return HRGATParams(
            [GATLayerParams(l.W.copy(), l.a.copy(), l.b.copy()) for l in self.layers],
            self.zoom_logits.copy(),
            self.head_w.copy(),
            self.head_b.copy(),
            self.slope,
        )

    def zeros_like(self) -> "HRGATParams":
        z = self.copy()
        for _, arr in z.named_arrays():
            arr[...] = 0.0
        return z

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for _, a in self.named_arrays())

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "layers": [
                {"W": l.W.tolist(), "a": l.a.tolist(), "b": l.b.tolist()} for l in self.layers
            ],
            "zoom_logits": self.zoom_logits.tolist(),
            "head_w": self.head_w.tolist(),
            "head_b": self.head_b.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HRGATParams":
        layers = [
            GATLayerParams(np.array(l["W"], dtype=float), np.array(l["a"], dtype=float), np.array(l["b"], dtype=float))
            for l in doc["layers"]
        ]
        return cls(
            layers,
            np.array(doc["zoom_logits"], dtype=float),
            np.array(doc["head_w"], dtype=float),
            np.array(doc["head_b"], dtype=float),
            float(doc.get("slope", LEAKY_SLOPE)),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "HRGATParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_params(
    n_features: int,
    d_hidden: int = 32,
    n_layers: int = 2,
    n_zooms: int = 3,
    seed: int = 0,
    slope: float = LEAKY_SLOPE,
    fine_zoom_bias: float = 0.0,
) -> HRGATParams:
    """Glorot-uniform weights and zero biases.

    Zoom logits start on a ramp from 0 (coarsest) to ``fine_zoom_bias`` (finest),
    so a positive bias lets fusion begin close to the tile's own embedding.
    """
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out, shape):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-r, r, size=shape)

    layers = []
    d_in = n_features
    for _ in range(n_layers):
        layers.append(
            GATLayerParams(
                W=glorot(d_in, d_hidden, (d_in, d_hidden)),
                a=glorot(2 * d_hidden, 1, (2 * d_hidden,)),
                b=np.zeros(d_hidden),
            )
        )
        d_in = d_hidden
    logits = fine_zoom_bias * np.linspace(0.0, 1.0, n_zooms) if n_zooms > 1 else np.zeros(n_zooms)
    return HRGATParams(layers, logits, glorot(d_hidden, 1, (d_hidden,)), np.zeros(1), slope)


def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - np.max(v))
    return e / e.sum()


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


# --- graph operators --------------------------------------------------------


class GraphOps:
    """Edge arrays and ancestor chains prepared once per graph.

    ``inter_messages`` defaults to ``hierarchical``; turning it off keeps zoom
    fusion but passes no messages along parent-child edges.
    """

    def __init__(self, graph: HierGraph, hierarchical: bool = True, inter_messages: bool | None = None):
        self.n = graph.n_nodes
        self.hierarchical = hierarchical
        inter = hierarchical if inter_messages is None else inter_messages
        self.src, self.dst, self.w = graph.message_edges(include_inter=inter)
        if np.any(self.w <= 0):
            raise NumericalError("edge weights must be positive")
        self.starts = np.flatnonzero(np.r_[True, self.dst[1:] != self.dst[:-1]])
        if len(self.starts) != self.n:
            raise ValueError("every node needs a self-loop")
        self.chains = graph.ancestor_chains() if hierarchical else None
        self.zoom = graph.zoom

    def segment_sum(self, v: np.ndarray) -> np.ndarray:
        return np.add.reduceat(v, self.starts)

    def segment_max(self, v: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(v, self.starts)

    def matrix(self, values: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((values, (self.dst, self.src)), shape=(self.n, self.n))


def _ops(graph, hierarchical) -> GraphOps:
    return graph if isinstance(graph, GraphOps) else GraphOps(graph, hierarchical)


def attention_weights(Z: np.ndarray, ops: GraphOps, a: np.ndarray, slope: float):
    """Per-edge rescaled attention and the intermediates needed for the backward pass."""
    d = Z.shape[1]
    s_dst = Z @ a[:d]
    s_src = Z @ a[d:]
    pre = s_dst[ops.dst] + s_src[ops.src]
    logits = leaky_relu(pre, slope)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite attention logits")
    m = ops.segment_max(logits)
    ex = np.exp(logits - m[ops.dst])
    alpha = ex / ops.segment_sum(ex)[ops.dst]
    num = alpha * ops.w
    alpha_w = num / ops.segment_sum(num)[ops.dst]
    return alpha_w, pre


def attention_coefficients(x: np.ndarray, graph, W: np.ndarray, a: np.ndarray, slope: float = LEAKY_SLOPE,
                           hierarchical: bool = True) -> sp.csr_matrix:
    """Rescaled attention as a sparse (n, n) matrix, row i = node i's neighbourhood."""
    ops = _ops(graph, hierarchical)
    alpha_w, _ = attention_weights(np.asarray(x) @ W, ops, a, slope)
    return ops.matrix(alpha_w)


def _layer_forward(x, ops: GraphOps, layer: GATLayerParams, slope: float):
    if x.shape[1] != layer.W.shape[0]:
        raise ValueError(f"feature dimension {x.shape[1]} does not match weight rows {layer.W.shape[0]}")
    Z = x @ layer.W
    alpha_w, pre = attention_weights(Z, ops, layer.a, slope)
    A = ops.matrix(alpha_w)
    u = A @ Z + layer.b
    h = elu(u)
    return h, (x, Z, alpha_w, pre, A, u)


def _layer_backward(dh, ops: GraphOps, layer: GATLayerParams, slope: float, cache):
    x, Z, alpha_w, pre, A, u = cache
    du = dh * np.where(u > 0, 1.0, np.exp(np.minimum(u, 0.0)))
    db = du.sum(axis=0)
    dZ = A.T @ du
    # d loss / d alpha'_e for edge e = (src -> dst)
    dalpha = np.einsum("ij,ij->i", du[ops.dst], Z[ops.src])
    # alpha' is a softmax of (logit + log w) within each dst block
    dlogit = alpha_w * (dalpha - ops.segment_sum(alpha_w * dalpha)[ops.dst])
    dpre = dlogit * np.where(pre > 0, 1.0, slope)
    d = Z.shape[1]
    ds_dst = np.bincount(ops.dst, weights=dpre, minlength=ops.n)
    ds_src = np.bincount(ops.src, weights=dpre, minlength=ops.n)
    a_dst, a_src = layer.a[:d], layer.a[d:]
    dZ += np.outer(ds_dst, a_dst) + np.outer(ds_src, a_src)
    da = np.concatenate([Z.T @ ds_dst, Z.T @ ds_src])
    dW = x.T @ dZ
    dx = dZ @ layer.W.T
    return dx, GATLayerParams(dW, da, db)


def gat_layer(x, graph, layer: GATLayerParams, slope: float = LEAKY_SLOPE, hierarchical: bool = True) -> np.ndarray:
    h, _ = _layer_forward(np.asarray(x, dtype=float), _ops(graph, hierarchical), layer, slope)
    return h


def fusion_coefficients(chains: np.ndarray, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convex weights over each node's available ancestor chain."""
    mask = (chains >= 0).astype(float)
    raw = mask * gamma[None, :]
    total = raw.sum(axis=1)
    return raw / total[:, None], mask, total


def fuse_zoom(h: np.ndarray, chains: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    coef, _, _ = fusion_coefficients(chains, gamma)
    safe = np.where(chains >= 0, chains, 0)
    return np.einsum("nz,nzd->nd", coef, h[safe])


@dataclass
class ForwardCache:
    layer_caches: list
    h_last: np.ndarray
    fused: np.ndarray
    coef: np.ndarray | None = None
    mask: np.ndarray | None = None
    total: np.ndarray | None = None


def _forward(ops: GraphOps, x: np.ndarray, params: HRGATParams):
    h = np.asarray(x, dtype=float)
    caches = []
    for layer in params.layers:
        h, cache = _layer_forward(h, ops, layer, params.slope)
        caches.append(cache)
    if ops.hierarchical:
        gamma = params.gamma
        coef, mask, total = fusion_coefficients(ops.chains, gamma)
        safe = np.where(ops.chains >= 0, ops.chains, 0)
        fused = np.einsum("nz,nzd->nd", coef, h[safe])
        fc = ForwardCache(caches, h, fused, coef, mask, total)
    else:
        fused = h
        fc = ForwardCache(caches, h, fused)
    y_hat = fused @ params.head_w + params.head_b[0]
    return y_hat, fc


def forward(graph, features: np.ndarray, params: HRGATParams, hierarchical: bool = True) -> np.ndarray:
    """Per-node prediction: GAT layers, zoom fusion (hierarchical only), linear head."""
    y_hat, _ = _forward(_ops(graph, hierarchical), features, params)
    return y_hat


def plain_gat_forward(graph, features: np.ndarray, params: HRGATParams) -> np.ndarray:
    return forward(graph, features, params, hierarchical=False)


def l2_penalty(params: HRGATParams) -> float:
    names = params.regularized_names()
    return float(sum((arr**2).sum() for name, arr in params.named_arrays() if name in names))


def loss_and_gradients(
    graph,
    features: np.ndarray,
    targets: np.ndarray,
    params: HRGATParams,
    lam: float = 0.0,
    mask: np.ndarray | None = None,
    hierarchical: bool = True,
) -> tuple[float, HRGATParams]:
    """Masked MSE plus ``lam`` times the L2 norm of the weights, with exact gradients.

    ``mask`` selects the nodes whose targets enter the loss (all nodes when None).
    Returned gradients share the structure of ``params``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ops = _ops(graph, hierarchical)
    targets = np.asarray(targets, dtype=float)
    sel = np.ones(ops.n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n_sel = int(sel.sum())
    if n_sel == 0:
        raise ValueError("loss mask selects no nodes")
    y_hat, fc = _forward(ops, features, params)
    resid = np.where(sel, y_hat - np.where(sel, targets, 0.0), 0.0)
    loss = float((resid**2).sum() / n_sel) + lam * l2_penalty(params)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")

    grads = params.zeros_like()
    dy = 2.0 * resid / n_sel
    grads.head_w[...] = fc.fused.T @ dy
    grads.head_b[0] = dy.sum()
    dfused = np.outer(dy, params.head_w)

    if ops.hierarchical:
        safe = np.where(ops.chains >= 0, ops.chains, 0)
        dh = np.zeros_like(fc.h_last)
        contrib = fc.coef[:, :, None] * dfused[:, None, :]
        np.add.at(dh, safe.ravel(), contrib.reshape(-1, dh.shape[1]) * fc.mask.reshape(-1, 1))
        dcoef = np.einsum("nd,nzd->nz", dfused, fc.h_last[safe]) * fc.mask
        inner = (dcoef * fc.coef).sum(axis=1, keepdims=True)
        dgamma = ((fc.mask / fc.total[:, None]) * (dcoef - inner)).sum(axis=0)
        gamma = params.gamma
        grads.zoom_logits[...] = gamma * (dgamma - gamma @ dgamma)
    else:
        dh = dfused

    for i in range(len(params.layers) - 1, -1, -1):
        dh, g = _layer_backward(dh, ops, params.layers[i], params.slope, fc.layer_caches[i])
        grads.layers[i].W[...] = g.W
        grads.layers[i].a[...] = g.a
        grads.layers[i].b[...] = g.b

    if lam > 0:
        names = params.regularized_names()
        for (name, p), (_, gr) in zip(params.named_arrays(), grads.named_arrays()):
            if name in names:
                gr += 2.0 * lam * p
    return loss, grads


def plain_gat_gradients(graph, features, targets, params, lam=0.0, mask=None):
    return loss_and_gradients(graph, features, targets, params, lam, mask, hierarchical=False)
