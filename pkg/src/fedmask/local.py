"""Client-side training for one round: plain, proximal and control-variate SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .nn import Batch, OptimState, ParamVector, loss_and_grad, sgd_step


@dataclass
class TrainConfig:
    local_epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mu: float = 0.01
    rng_stream: int | np.random.SeedSequence | None = 0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


@dataclass
class ControlVariate:
    client_c: ParamVector
    server_c: ParamVector

    @classmethod
    def zeros(cls, model: ParamVector) -> "ControlVariate":
        return cls(model.zeros_like(), model.zeros_like())


@dataclass
class LocalResult:
    model: ParamVector
    tau: int
    samples: int
    updated_client_c: ParamVector | None = None


def client_stream(master_seed: int, client_id: int, round_idx: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, client_id, round_idx])


def steps_per_round(n: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n / batch_size)


def proximal_grad(grad: ParamVector, model: ParamVector, anchor: ParamVector,
                  mu: float) -> ParamVector:
    """Gradient of loss + (mu/2)·||w - anchor||²."""
    return grad.like(grad.values + mu * (model.values - anchor.values))


def _run(global_model: ParamVector, data: Dataset, cfg: TrainConfig, *,
         momentum: float, correction: np.ndarray | None = None, mu: float = 0.0):
    if len(data) == 0:
        raise ValueError("client has no training data")
    rng = np.random.default_rng(cfg.rng_stream)
    state = OptimState.for_model(global_model, lr=cfg.lr, momentum=momentum,
                                 weight_decay=cfg.weight_decay)
    model = global_model.copy()
    n = len(data)
    tau = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grad = loss_and_grad(model, Batch(data.inputs[idx], data.labels[idx]))
            if mu:
                grad = proximal_grad(grad, model, global_model, mu)
            if correction is not None:
                grad = grad.like(grad.values + correction)
            model = sgd_step(model, grad, state)
            tau += 1
    return model, tau


def train_plain(global_model: ParamVector, data: Dataset, cfg: TrainConfig) -> LocalResult:
    model, tau = _run(global_model, data, cfg, momentum=cfg.momentum)
    return LocalResult(model, tau, len(data))


def train_prox(global_model: ParamVector, data: Dataset, cfg: TrainConfig) -> LocalResult:
    """Plain SGD on the loss plus (mu/2)·||w - global||²."""
    model, tau = _run(global_model, data, cfg, momentum=cfg.momentum, mu=cfg.mu)
    return LocalResult(model, tau, len(data))


def train_scaffold(global_model: ParamVector, data: Dataset, cfg: TrainConfig,
                   cv: ControlVariate) -> LocalResult:
    """SGD on g - c_i + c without momentum, then the option-II client variate update

    c_i <- c_i - c + (global - model) / (tau * lr)
    """
    if cv.client_c.values.shape != global_model.values.shape or \
            cv.server_c.values.shape != global_model.values.shape:
        raise ValueError("control variate shape does not match model")
    correction = cv.server_c.values - cv.client_c.values
    model, tau = _run(global_model, data, cfg, momentum=0.0,
                      correction=correction if correction.any() else None)
    if cfg.lr > 0:
        new_c = cv.client_c.values - cv.server_c.values + \
            (global_model.values - model.values) / (tau * cfg.lr)
    else:
        new_c = cv.client_c.values.copy()
    return LocalResult(model, tau, len(data), global_model.like(new_c))
