"""Server-side aggregation: FedAvg family, FedNova, SCAFFOLD and class-aware masking.

The masked strategy evaluates every client model on per-class validation
sets, picks the class each model handles best, takes the loss gradient on
that class's data, keeps the top-``p`` fraction of parameters by gradient
magnitude at weight 1 and scales the rest by ``gamma``. Masks are smoothed
with the previous round's mask and the masked models are averaged with
weights equal to each mask's total mass. Only model parameters are used;
sample counts and step counts never reach this path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from .data import ClassValidationSets, Dataset
from .nn import ParamVector, ShapeError, evaluate, loss_and_grad


@dataclass
class ClientUpdate:
    client_id: int
    model: ParamVector
    samples: int = 1
    tau: int = 1
    control_delta: ParamVector | None = None
    new_client_c: ParamVector | None = None
    # gradients on client data at the trained and at the broadcast model,
    # only needed by the gradient_diff SCAFFOLD server update
    grad_local: ParamVector | None = None
    grad_global: ParamVector | None = None


def _check_shapes(vectors: Sequence[ParamVector]) -> None:
    if not vectors:
        raise ValueError("need at least one client")
    n = vectors[0].values.size
    for v in vectors:
        if v.values.size != n:
            raise ShapeError("client vectors have different shapes")


def _weighted_mean(models: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    # fixed left-to-right summation so equal inputs give equal bits
    acc = np.zeros_like(models[0].values)
    for m, w in zip(models, weights):
        acc += w * m.values
    return models[0].like(acc / sum(weights))


def _reduced(weights: Sequence[int]) -> list[int]:
    g = reduce(math.gcd, weights)
    return [w // g for w in weights]


def _sorted(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    return sorted(updates, key=lambda u: u.client_id)


def agg_nwfedavg(updates: Sequence[ClientUpdate]) -> ParamVector:
    updates = _sorted(updates)
    models = [u.model for u in updates]
    _check_shapes(models)
    return _weighted_mean(models, [1] * len(models))


def agg_fedavg(updates: Sequence[ClientUpdate]) -> ParamVector:
    """Sample-count weighted mean. Integer weights are divided by their gcd first,
    which makes equal counts reproduce the unweighted mean exactly."""
    updates = _sorted(updates)
    models = [u.model for u in updates]
    _check_shapes(models)
    if any(u.samples < 1 for u in updates):
        raise ValueError("every client needs n_i >= 1")
    return _weighted_mean(models, _reduced([int(u.samples) for u in updates]))


def agg_fednova(updates: Sequence[ClientUpdate], global_prev: ParamVector) -> ParamVector:
    """global + sum(p_i * delta_i) / sum(p_i) with p_i proportional to n_i * tau_i."""
    updates = _sorted(updates)
    _check_shapes([u.model for u in updates] + [global_prev])
    if any(u.tau < 1 or u.samples < 1 for u in updates):
        raise ValueError("FedNova needs tau_i >= 1 and n_i >= 1")
    raw = _reduced([int(u.samples) * int(u.tau) for u in updates])
    total = sum(raw)
    p = [r / total for r in raw]
    acc = np.zeros_like(global_prev.values)
    for u, w in zip(updates, p):
        acc += w * (u.model.values - global_prev.values)
    return global_prev.like(global_prev.values + acc / sum(p))


SCAFFOLD_MODES = ("standard", "gradient_diff")


def agg_scaffold(updates: Sequence[ClientUpdate], server_c: ParamVector,
                 mode: str = "standard") -> tuple[ParamVector, ParamVector]:
    """Unweighted model mean plus the server control-variate step.

    ``standard``: c += mean(new c_i - old c_i).
    ``gradient_diff``: c += mean(grad F_i(local model) - grad F_i(global model)).
    """
    updates = _sorted(updates)
    model = agg_nwfedavg(updates)
    if mode == "standard":
        deltas = [u.control_delta for u in updates]
    elif mode == "gradient_diff":
        if any(u.grad_local is None or u.grad_global is None for u in updates):
            raise ValueError("gradient_diff SCAFFOLD needs grad_local and grad_global per client")
        deltas = [u.grad_local.like(u.grad_local.values - u.grad_global.values) for u in updates]
    else:
        raise ValueError(f"unknown SCAFFOLD mode {mode!r}")
    if any(d is None for d in deltas):
        raise ValueError("SCAFFOLD needs a control delta from every client")
    acc = np.zeros_like(server_c.values)
    for d in deltas:
        acc += d.values
    return model, server_c.like(server_c.values + acc / len(deltas))


# --- class-aware masking -------------------------------------------------------


@dataclass
class MaskConfig:
    zip_percent: float = 0.5
    gamma: float = 0.5
    beta: float = 0.4
    scope: str = "per_tensor"
    assignment: str = "dominant_class"
    top_k: int = 1

    def __post_init__(self):
        if not 0 < self.zip_percent <= 1:
            raise ValueError("zip_percent must be in (0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must be in [0, 1]")
        if self.scope not in ("per_tensor", "global"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.assignment not in ("dominant_class", "top_models"):
            raise ValueError(f"unknown assignment {self.assignment!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class Mask:
    values: ParamVector
    gamma: float
    round: int = 0

    @classmethod
    def ones(cls, like: ParamVector, gamma: float) -> "Mask":
        return cls(like.like(np.ones_like(like.values)), gamma, 0)


def class_accuracies(model: ParamVector, vsets: ClassValidationSets) -> np.ndarray:
    """Accuracy on each V_c; NaN where V_c is empty."""
    out = np.full(vsets.num_classes, np.nan)
    for c, v in enumerate(vsets.per_class):
        if len(v):
            out[c] = evaluate(model, v)[0]
    return out


def assign_dominant_class(model: ParamVector, vsets: ClassValidationSets) -> int:
    """argmax_c accuracy(model, V_c) over non-empty classes; ties go to the lowest c."""
    acc = class_accuracies(model, vsets)
    if np.all(np.isnan(acc)):
        raise ValueError("all validation sets are empty")
    return int(np.nanargmax(acc))


def assign_top_models(models: Sequence[ParamVector], vsets: ClassValidationSets,
                      top_k: int = 1) -> dict[int, int]:
    """Per class, pick the ``top_k`` most accurate models (ties by position).

    Returns {position: class}. A model picked for several classes keeps the one
    it scores best on; models never picked are absent from the result.
    """
    accs = np.stack([class_accuracies(m, vsets) for m in models])
    if np.all(np.isnan(accs)):
        raise ValueError("all validation sets are empty")
    chosen: dict[int, int] = {}
    for c in vsets.nonempty():
        order = np.argsort(-accs[:, c], kind="stable")[:top_k]
        for i in order:
            i = int(i)
            if i not in chosen or accs[i, c] > accs[i, chosen[i]]:
                chosen[i] = c
    return chosen


def class_gradient(model: ParamVector, vc: Dataset) -> ParamVector:
    if len(vc) == 0:
        raise ValueError("validation set for the assigned class is empty")
    return loss_and_grad(model, vc)[1]


def retained_count(size: int, p: float) -> int:
    return max(1, math.floor(p * size + 0.5))


def _kth_largest_abs(g: np.ndarray, p: float) -> float:
    if g.size == 0:
        raise ValueError("empty gradient")
    k = retained_count(g.size, p)
    mag = np.abs(g)
    return float(np.partition(mag, g.size - k)[g.size - k])


def topk_threshold(g, p: float, scope: str = "global") -> float | list[float]:
    """Magnitude threshold keeping the top ``p`` fraction of entries.

    ``g`` is a flat array (or ParamVector) for ``scope="global"``; with
    ``scope="per_tensor"`` it must be a ParamVector and one threshold per
    weight/bias tensor is returned in storage order.
    """
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if scope == "global":
        values = g.values if isinstance(g, ParamVector) else np.asarray(g, dtype=np.float64)
        return _kth_largest_abs(values, p)
    if scope == "per_tensor":
        if not isinstance(g, ParamVector):
            raise TypeError("per_tensor scope needs a ParamVector")
        return [_kth_largest_abs(g.values[s], p) for s in g.layout.tensor_slices()]
    raise ValueError(f"unknown scope {scope!r}")


def build_mask(g: ParamVector, cfg: MaskConfig, round_idx: int = 0) -> Mask:
    """1 where |g| >= threshold, gamma elsewhere."""
    mag = np.abs(g.values)
    out = np.full_like(mag, cfg.gamma)
    if cfg.scope == "global":
        out[mag >= topk_threshold(g, cfg.zip_percent, "global")] = 1.0
    else:
        taus = topk_threshold(g, cfg.zip_percent, "per_tensor")
        for s, tau in zip(g.layout.tensor_slices(), taus):
            part = out[s]
            part[mag[s] >= tau] = 1.0
    return Mask(g.like(out), cfg.gamma, round_idx)


def update_mask(new: Mask, prev: Mask, beta: float) -> Mask:
    """(1 - beta) * new + beta * prev, kept inside [gamma, 1]."""
    if new.gamma != prev.gamma:
        raise ValueError(f"gamma mismatch: {new.gamma} vs {prev.gamma}")
    if new.values.values.shape != prev.values.values.shape:
        raise ShapeError("mask shapes differ")
    mixed = (1.0 - beta) * new.values.values + beta * prev.values.values
    np.clip(mixed, new.gamma, 1.0, out=mixed)
    return Mask(new.values.like(mixed), new.gamma, new.round)


def mask_importance(m: Mask) -> float:
    return float(np.sum(m.values.values))


def masked_aggregate(models: Sequence[ParamVector], masks: Sequence[Mask]) -> ParamVector:
    """sum_i w_i * (model_i * mask_i) / sum_i w_i with w_i the mask mass."""
    if not models or len(models) != len(masks):
        raise ValueError("need equally many (>= 1) models and masks")
    _check_shapes(list(models) + [m.values for m in masks])
    omegas = [mask_importance(m) for m in masks]
    acc = np.zeros_like(models[0].values)
    for model, mask, w in zip(models, masks, omegas):
        acc += w * (model.values * mask.values.values)
    return models[0].like(acc / sum(omegas))


def masked_round(updates: Sequence[ClientUpdate], vsets: ClassValidationSets,
                 cfg: MaskConfig, prev_masks: dict[int, Mask] | None = None,
                 round_idx: int = 0) -> tuple[ParamVector, dict[int, Mask]]:
    """One round of class-aware masked aggregation.

    ``prev_masks`` maps client id to last round's smoothed mask; missing
    clients start from an all-ones mask. Returns the new global model and
    the updated mask store (clients not used this round keep their mask).
    """
    updates = _sorted(updates)
    _check_shapes([u.model for u in updates])
    prev_masks = dict(prev_masks or {})

    if cfg.assignment == "dominant_class":
        classes = {i: assign_dominant_class(u.model, vsets) for i, u in enumerate(updates)}
    else:
        classes = assign_top_models([u.model for u in updates], vsets, cfg.top_k)

    models, masks = [], []
    for i, u in enumerate(updates):
        if i not in classes:
            continue
        grad = class_gradient(u.model, vsets.per_class[classes[i]])
        fresh = build_mask(grad, cfg, round_idx)
        prev = prev_masks.get(u.client_id) or Mask.ones(u.model, cfg.gamma)
        smoothed = update_mask(fresh, prev, cfg.beta)
        prev_masks[u.client_id] = smoothed
        models.append(u.model)
        masks.append(smoothed)
    return masked_aggregate(models, masks), prev_masks


class MaskedAggregator:
    """Holds the per-client mask store between rounds."""

    def __init__(self, cfg: MaskConfig, vsets: ClassValidationSets):
        self.cfg = cfg
        self.vsets = vsets
        self.masks: dict[int, Mask] = {}
        self.round = 0

    def __call__(self, updates: Sequence[ClientUpdate]) -> ParamVector:
        self.round += 1
        model, self.masks = masked_round(updates, self.vsets, self.cfg, self.masks, self.round)
        return model
