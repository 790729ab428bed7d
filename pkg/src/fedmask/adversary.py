"""Attack injection: malicious-client selection, label flipping, distributed
backdoor triggers, and attack-success-rate measurement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import ParamVector, predict


ATTACK_KINDS = ("none", "convergence_prevention", "dba")


@dataclass
class AttackSpec:
    kind: str = "none"
    malicious_ratio: float = 0.0
    poisoned_data_ratio: float = 0.0
    target_class: int = 0
    num_triggers: int = 4
    trigger_size: int = 2
    trigger_value: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0 <= self.malicious_ratio <= 1:
            raise ValueError("malicious_ratio must be in [0, 1]")
        if not 0 <= self.poisoned_data_ratio <= 1:
            raise ValueError("poisoned_data_ratio must be in [0, 1]")
        if self.num_triggers < 1 or self.trigger_size < 1:
            raise ValueError("num_triggers and trigger_size must be >= 1")


@dataclass(frozen=True)
class TriggerPattern:
    pattern_id: int
    pixel_coords: tuple[tuple[int, int], ...]
    value: float = 1.0

    def flat_indices(self, image_shape: tuple[int, int]) -> np.ndarray:
        rows, cols = image_shape
        for r, c in self.pixel_coords:
            if not (0 <= r < rows and 0 <= c < cols):
                raise ValueError(
                    f"trigger {self.pattern_id} pixel ({r}, {c}) outside {rows}x{cols} image"
                )
        return np.array([r * cols + c for r, c in self.pixel_coords], dtype=np.int64)


def corner_triggers(image_shape: tuple[int, int], num: int = 4, size: int = 2,
                    value: float = 1.0) -> list[TriggerPattern]:
    """``size``x``size`` patches in the image corners (top-left, top-right,
    bottom-left, bottom-right), at most four."""
    rows, cols = image_shape
    if num > 4:
        raise ValueError("corner layout supports at most four triggers")
    if 2 * size > min(rows, cols):
        raise ValueError(f"{size}x{size} corner patches overlap in a {rows}x{cols} image")
    origins = [(0, 0), (0, cols - size), (rows - size, 0), (rows - size, cols - size)]
    out = []
    for pid, (r0, c0) in enumerate(origins[:num]):
        coords = tuple((r0 + dr, c0 + dc) for dr in range(size) for dc in range(size))
        out.append(TriggerPattern(pid, coords, value))
    return out


def _count(fraction: float, n: int) -> int:
    return math.floor(fraction * n + 0.5)


def max_malicious(n_clients: int) -> int:
    return (n_clients - 1) // 2


def select_malicious(n_clients: int, ratio: float, seed: int) -> list[int]:
    """Sorted ids of min(floor(ratio*N), floor((N-1)/2)) clients drawn without replacement."""
    m = min(math.floor(ratio * n_clients), max_malicious(n_clients))
    m = max(m, 0)
    if m == 0:
        return []
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_clients, size=m, replace=False))


def poison_labels(data: Dataset, fraction: float, seed: int) -> Dataset:
    """Flip round(fraction*N) labels, each to a uniform choice among the other classes."""
    if data.num_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    k = _count(fraction, len(data))
    if k == 0:
        return data
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=k, replace=False)
    labels = data.labels.copy()
    labels[idx] = (labels[idx] + rng.integers(1, data.num_classes, size=k)) % data.num_classes
    return data.with_labels(labels)


def _stamp(inputs: np.ndarray, triggers, image_shape) -> np.ndarray:
    out = inputs.copy()
    for t in triggers:
        out[:, t.flat_indices(image_shape)] = t.value
    return out


def inject_backdoor(data: Dataset, trigger: TriggerPattern, fraction: float,
                    target: int, seed: int) -> Dataset:
    """Stamp ``trigger`` onto round(fraction*N) samples and relabel them as ``target``."""
    if data.image_shape is None:
        raise ValueError("backdoor injection needs image-shaped inputs")
    if not 0 <= target < data.num_classes:
        raise ValueError(f"target class {target} out of range")
    pixels = trigger.flat_indices(data.image_shape)
    k = _count(fraction, len(data))
    if k == 0:
        return data
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=k, replace=False)
    inputs = data.inputs.copy()
    labels = data.labels.copy()
    inputs[np.ix_(idx, pixels)] = trigger.value
    labels[idx] = target
    return Dataset(inputs, labels, data.num_classes, data.image_shape)


def apply_global_trigger(inputs: np.ndarray, triggers, image_shape) -> np.ndarray:
    """Every pattern stamped onto every row."""
    return _stamp(np.asarray(inputs, dtype=np.float64), triggers, image_shape)


def evaluate_asr(model: ParamVector, test: Dataset, triggers, target: int) -> float:
    """Fraction of non-target test samples classified as ``target`` once triggered."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    keep = test.labels != target
    if not keep.any():
        raise ValueError("test set only contains target-class samples")
    victims = test.subset(np.flatnonzero(keep))
    stamped = victims.with_inputs(apply_global_trigger(victims.inputs, triggers, test.image_shape))
    return float(np.mean(predict(model, stamped) == target))


@dataclass
class AttackPlan:
    """Which clients are malicious and how each one's data is altered."""

    spec: AttackSpec
    malicious: list[int] = field(default_factory=list)
    triggers: list[TriggerPattern] = field(default_factory=list)

    def trigger_for(self, client_id: int) -> TriggerPattern:
        return self.triggers[self.malicious.index(client_id) % len(self.triggers)]

    def poison(self, client_id: int, data: Dataset) -> Dataset:
        if client_id not in self.malicious:
            return data
        seed = int(np.random.SeedSequence([self.spec.seed, client_id]).generate_state(1)[0])
        if self.spec.kind == "convergence_prevention":
            return poison_labels(data, self.spec.poisoned_data_ratio, seed)
        if self.spec.kind == "dba":
            return inject_backdoor(data, self.trigger_for(client_id),
                                   self.spec.poisoned_data_ratio, self.spec.target_class, seed)
        return data


def plan_attack(spec: AttackSpec, n_clients: int, image_shape=None) -> AttackPlan:
    if spec.kind == "none":
        return AttackPlan(spec)
    malicious = select_malicious(n_clients, spec.malicious_ratio, spec.seed)
    triggers = []
    if spec.kind == "dba":
        if image_shape is None:
            raise ValueError("dba needs an image-shaped dataset")
        triggers = corner_triggers(image_shape, spec.num_triggers, spec.trigger_size,
                                   spec.trigger_value)
    return AttackPlan(spec, malicious, triggers)
