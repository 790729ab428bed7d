"""Datasets, IDX I/O, Dirichlet label-skew partitioning and validation splits."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset(Batch):
    num_classes: int = 0
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.num_classes == 0 and len(self.labels):
            self.num_classes = int(self.labels.max()) + 1
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.image_shape is not None:
            self.image_shape = tuple(self.image_shape)
            if len(self) and self.image_shape[0] * self.image_shape[1] != self.dim:
                raise ValueError(f"image shape {self.image_shape} does not match dim {self.dim}")

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.inputs[idx].reshape(len(idx), self.dim),
            self.labels[idx],
            self.num_classes,
            self.image_shape,
        )

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(self.inputs, labels, self.num_classes, self.image_shape)

    def with_inputs(self, inputs: np.ndarray) -> "Dataset":
        return Dataset(inputs, self.labels, self.num_classes, self.image_shape)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def generate_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float = 0.5,
    seed: int = 0,
    image_shape: tuple[int, int] | None = None,
) -> Dataset:
    """Isotropic Gaussian clusters around centers drawn uniformly from [0, 1]^dim.

    Samples are stored class-major (all of class 0, then class 1, ...). With
    ``image_shape`` the inputs are clipped to [0, 1] so they read as pixels.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(num_classes, dim))
    noise = rng.standard_normal((num_classes, per_class, dim))
    inputs = (centers[:, None, :] + spread * noise).reshape(-1, dim)
    if image_shape is not None:
        inputs = np.clip(inputs, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(inputs, labels, num_classes, image_shape)


def _read_header(raw: bytes, expected_magic: int, field: str) -> tuple[list[int], int]:
    if len(raw) < 4:
        raise IDXFormatError(f"{field}: file too short for magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"{field}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IDXFormatError(f"{field}: truncated dimension header")
    dims = list(struct.unpack(f">{ndim}I", raw[4:end]))
    if len(raw) - end != math.prod(dims):
        raise IDXFormatError(
            f"{field}: payload has {len(raw) - end} bytes, header declares {math.prod(dims)}"
        )
    return dims, end


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    (n_img, rows, cols), off = _read_header(img_raw, IDX_IMAGES_MAGIC, "images")
    (n_lab,), loff = _read_header(lab_raw, IDX_LABELS_MAGIC, "labels")
    if n_img != n_lab:
        raise IDXFormatError(f"count: images file has {n_img} items, labels file has {n_lab}")
    if n_img == 0:
        raise IDXFormatError("count: files contain no items")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=off).reshape(n_img, rows * cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=loff).astype(np.int64)
    return Dataset(
        pixels.astype(np.float64) / 255.0,
        labels,
        num_classes or int(labels.max()) + 1,
        (rows, cols),
    )


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write ``dataset`` as an IDX pair; inputs are quantised from [0, 1] to u8."""
    if dataset.image_shape is None:
        raise ValueError("dataset has no image shape")
    rows, cols = dataset.image_shape
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    if dataset.labels.max(initial=0) > 255:
        raise ValueError("labels do not fit in u8")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(dataset), rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)))
        f.write(dataset.labels.astype(np.uint8).tobytes())


@dataclass
class PartitionPlan:
    assignments: list[np.ndarray]
    alpha: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def histograms(self, data: Dataset) -> np.ndarray:
        return np.stack([np.bincount(data.labels[a], minlength=data.num_classes)
                         for a in self.assignments])


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; leftover units go to the largest
    fractional parts, ties to the lower index."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _draw_partition(data: Dataset, n_clients: int, alpha: float, seed: int):
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        g = rng.standard_gamma(alpha, size=n_clients)
        if g.sum() <= 0:
            return None
        counts = largest_remainder(g / g.sum(), idx.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(n_clients):
            parts[i].append(idx[bounds[i]:bounds[i + 1]])
    out = [np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in parts]
    if any(a.size == 0 for a in out):
        return None
    return out


def dirichlet_partition(data: Dataset, n_clients: int, alpha: float, seed: int,
                        max_attempts: int = 100) -> PartitionPlan:
    """Label-skew split: each class is divided across clients by a Dirichlet(alpha) draw.

    The draw for one attempt, with ``rng = default_rng(seed)``, is: for every
    class in increasing order, ``rng.permutation`` of that class's indices,
    then ``rng.standard_gamma(alpha, n_clients)`` normalised to proportions,
    then largest-remainder counts taken off the permuted indices in client
    order. If any client ends up empty the attempt is repeated with seed+1.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_clients > len(data):
        raise ValueError(f"{n_clients} clients but only {len(data)} samples")
    for attempt in range(max_attempts):
        parts = _draw_partition(data, n_clients, alpha, seed + attempt)
        if parts is not None:
            return PartitionPlan(parts, alpha, seed + attempt)
    raise RuntimeError(f"no partition without empty clients after {max_attempts} draws")


@dataclass
class ClassValidationSets:
    per_class: list[Dataset]

    @property
    def num_classes(self) -> int:
        return len(self.per_class)

    def nonempty(self) -> list[int]:
        return [c for c, v in enumerate(self.per_class) if len(v)]


def split_validation(test: Dataset, per_class_cap: int = 32) -> tuple[ClassValidationSets, Dataset]:
    """Move the first ``per_class_cap`` samples of each class into V_c."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    taken = np.zeros(len(test), dtype=bool)
    vsets = []
    for c in range(test.num_classes):
        idx = np.flatnonzero(test.labels == c)[:per_class_cap]
        taken[idx] = True
        vsets.append(test.subset(idx))
    return ClassValidationSets(vsets), test.subset(np.flatnonzero(~taken))
