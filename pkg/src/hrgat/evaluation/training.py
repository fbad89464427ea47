"""Full-graph training loop with Adam or plain gradient descent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from ..model import GraphOps, HRGATParams, init_params, loss_and_gradients


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    lam: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    d_hidden: int = 32
    n_layers: int = 2
    slope: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    target_transform: str = "none"
    fine_zoom_bias: float = 2.0


@dataclass
class TrainResult:
    params: HRGATParams
    history: list[float] = field(default_factory=list)
    gamma_trace: list[np.ndarray] = field(default_factory=list)


class Adam:
    def __init__(self, params: HRGATParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: HRGATParams, grads: HRGATParams) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(
            params.named_arrays(), grads.named_arrays(), self.m.named_arrays(), self.v.named_arrays()
        ):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: HRGATParams, lr: float):
        self.lr = lr

    def step(self, params: HRGATParams, grads: HRGATParams) -> None:
        for (_, p), (_, g) in zip(params.named_arrays(), grads.named_arrays()):
            p -= self.lr * g


def train(
    graph,
    features: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    mask: np.ndarray | None = None,
    hierarchical: bool = True,
    params: HRGATParams | None = None,
    trace_gamma: bool = False,
) -> TrainResult:
    """Run ``config.epochs`` full-graph updates; the loss sees only ``mask`` nodes.

    ``history[e]`` is the masked training loss evaluated before update ``e``.
    """
    ops = graph if isinstance(graph, GraphOps) else GraphOps(graph, hierarchical)
    n_zooms = ops.chains.shape[1] if ops.hierarchical else 1
    if params is None:
        params = init_params(
            features.shape[1], config.d_hidden, config.n_layers, n_zooms, seed=config.seed, slope=config.slope,
            fine_zoom_bias=config.fine_zoom_bias,
        )
    else:
        params = params.copy()
    if config.optimizer == "adam":
        opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    elif config.optimizer == "sgd":
        opt = SGD(params, config.lr)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    result = TrainResult(params)
    for epoch in range(config.epochs):
        loss, grads = loss_and_gradients(ops, features, targets, params, config.lam, mask)
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at epoch {epoch}")
        result.history.append(loss)
        opt.step(params, grads)
        if not params.all_finite():
            raise NumericalError(f"non-finite parameters after epoch {epoch}")
        if trace_gamma:
            result.gamma_trace.append(params.gamma.copy())
    return result
