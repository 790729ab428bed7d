"""Flat-parameter MLP classifier with hand-written backprop and momentum SGD.

Every model, gradient and mask in the package is a :class:`ParamVector`: a
1-D float64 array plus the :class:`LayerLayout` that says how to slice it into
weight matrices and bias vectors. Weights of layer ``k`` are stored row-major
with shape ``(input_dim, output_dim)``, immediately followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when arrays do not match the model layout."""


@dataclass(frozen=True)
class LayerLayout:
    layers: tuple[tuple[int, int, bool], ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("layout needs at least one layer")
        for (_, out_dim, _), (in_dim, _, _) in zip(self.layers, self.layers[1:]):
            if out_dim != in_dim:
                raise ShapeError(f"layer dims not compatible: {out_dim} -> {in_dim}")
        acts = self.activations or ("relu",) * (len(self.layers) - 1)
        if len(acts) != len(self.layers) - 1:
            raise ShapeError("need one activation per hidden layer")
        for a in acts:
            if a not in ("relu", "identity"):
                raise ShapeError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", tuple(acts))

    @classmethod
    def mlp(cls, input_dim: int, hidden: int | list[int], num_classes: int) -> "LayerLayout":
        widths = [hidden] if isinstance(hidden, int) else list(hidden)
        dims = [input_dim, *widths, num_classes]
        return cls(tuple((a, b, True) for a, b in zip(dims, dims[1:])))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][1]

    @property
    def total_params(self) -> int:
        return sum(i * o + (o if b else 0) for i, o, b in self.layers)

    def layer_slices(self) -> list[tuple[slice, slice | None]]:
        """(weight slice, bias slice or None) for each layer, in storage order."""
        out = []
        pos = 0
        for i, o, has_bias in self.layers:
            w = slice(pos, pos + i * o)
            pos += i * o
            b = None
            if has_bias:
                b = slice(pos, pos + o)
                pos += o
            out.append((w, b))
        return out

    def tensor_slices(self) -> list[slice]:
        """One slice per weight matrix or bias vector."""
        return [s for w, b in self.layer_slices() for s in (w, b) if s is not None]


@dataclass
class ParamVector:
    values: np.ndarray
    layout: LayerLayout

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.layout.total_params:
            raise ShapeError(
                f"expected {self.layout.total_params} params, got shape {self.values.shape}"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def unpack(self) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """Views of (W, b) per layer; W has shape (input_dim, output_dim)."""
        out = []
        for (i, o, _), (ws, bs) in zip(self.layout.layers, self.layout.layer_slices()):
            w = self.values[ws].reshape(i, o)
            b = self.values[bs] if bs is not None else None
            out.append((w, b))
        return out

    def __len__(self):
        return self.values.size


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim == 1 and self.inputs.size == 0:
            self.inputs = self.inputs.reshape(0, 0)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"inputs {self.inputs.shape} do not match labels {self.labels.shape}"
            )

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class OptimState:
    velocity: np.ndarray
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def for_model(cls, model: ParamVector, **hyper) -> "OptimState":
        return cls(np.zeros_like(model.values), **hyper)


def init_params(layout: LayerLayout, rng: np.random.Generator) -> ParamVector:
    """He-uniform weights, zero biases."""
    values = np.zeros(layout.total_params)
    for (i, o, _), (ws, _) in zip(layout.layers, layout.layer_slices()):
        limit = np.sqrt(6.0 / i)
        values[ws] = rng.uniform(-limit, limit, size=i * o)
    return ParamVector(values, layout)


def _check_batch(model: ParamVector, inputs: np.ndarray) -> None:
    if inputs.ndim != 2 or (inputs.shape[0] and inputs.shape[1] != model.layout.input_dim):
        raise ShapeError(
            f"batch has {inputs.shape[-1] if inputs.ndim == 2 else inputs.shape} features, "
            f"model expects {model.layout.input_dim}"
        )


def _forward_cache(model: ParamVector, x: np.ndarray):
    acts = [x]
    pre = []
    params = model.unpack()
    h = x
    for k, (w, b) in enumerate(params):
        z = h @ w
        if b is not None:
            z = z + b
        pre.append(z)
        if k < len(params) - 1 and model.layout.activations[k] == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    return acts, pre


def forward(model: ParamVector, batch: Batch) -> np.ndarray:
    x = batch.inputs
    if x.shape[0] == 0:
        return np.zeros((0, model.layout.num_classes))
    _check_batch(model, x)
    acts, _ = _forward_cache(model, x)
    return acts[-1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(model: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    n = len(batch)
    if n == 0:
        raise ValueError("loss is undefined on an empty batch")
    _check_batch(model, batch.inputs)
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= model.layout.num_classes:
        raise ShapeError("label out of range for model output")

    acts, pre = _forward_cache(model, batch.inputs)
    logp = _log_softmax(acts[-1])
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())

    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    delta /= n

    grad = np.zeros_like(model.values)
    params = model.unpack()
    slices = model.layout.layer_slices()
    for k in range(len(params) - 1, -1, -1):
        w, b = params[k]
        ws, bs = slices[k]
        grad[ws] = (acts[k].T @ delta).ravel()
        if bs is not None:
            grad[bs] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ w.T
            if model.layout.activations[k - 1] == "relu":
                delta = delta * (pre[k - 1] > 0)
    return max(loss, 0.0), model.like(grad)


def sgd_step(model: ParamVector, grad: ParamVector, state: OptimState) -> ParamVector:
    """Heavy-ball step with L2 decay folded into the gradient; mutates ``state``."""
    if grad.values.shape != model.values.shape or state.velocity.shape != model.values.shape:
        raise ShapeError("model, gradient and velocity shapes differ")
    g = grad.values
    if state.weight_decay:
        g = g + state.weight_decay * model.values
    if state.momentum:
        state.velocity = state.momentum * state.velocity + g
    else:
        state.velocity = g.copy()
    return model.like(model.values - state.lr * state.velocity)


ABSENT = -1.0


def predict(model: ParamVector, batch: Batch) -> np.ndarray:
    return forward(model, batch).argmax(axis=1)


def evaluate(model: ParamVector, dataset: Batch) -> tuple[float, np.ndarray]:
    """Overall accuracy and per-class accuracy (``ABSENT`` for missing classes)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    num_classes = model.layout.num_classes
    hits = predict(model, dataset) == dataset.labels
    per_class = np.full(num_classes, ABSENT)
    counts = np.bincount(dataset.labels, minlength=num_classes)
    correct = np.bincount(dataset.labels, weights=hits, minlength=num_classes)
    present = counts > 0
    per_class[present] = correct[present] / counts[present]
    return float(hits.sum()) / n, per_class
