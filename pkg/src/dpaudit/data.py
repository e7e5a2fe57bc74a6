"""Example containers and dataset construction.

Features are always float arrays scaled to the unit interval; labels are
integer class indices. The array-backed :class:`Dataset` is the working
representation everywhere, with :class:`Example` available as a per-record
view for callers that prefer one object per example.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError

CIFAR_RECORD_BYTES = 3073
CIFAR_IMAGE_BYTES = 3072
CIFAR_MAX_LABEL = 9


@dataclass(frozen=True)
class Example:
    """One labeled input.

    Attributes:
        features: 1-D float array with values in [0, 1].
        label: class index in [0, num_classes).
        is_canary: whether this record is an audit canary.
        example_id: identifier, unique within a dataset.
    """

    features: np.ndarray
    label: int
    is_canary: bool = False
    example_id: int = -1


@dataclass
class Dataset:
    """Array-backed collection of examples.

    Attributes:
        X: (n, input_dim) float64 feature matrix, values in [0, 1].
        y: (n,) int64 labels.
        ids: (n,) int64 unique identifiers.
        canary_slot: (n,) int64, -1 for ordinary examples, otherwise the
            index of this row in the canary set it came from.
    """

    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    canary_slot: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if self.canary_slot is None:
            self.canary_slot = np.full(len(self.y), -1, dtype=np.int64)
        self.canary_slot = np.ascontiguousarray(self.canary_slot, dtype=np.int64)
        n = self.X.shape[0]
        if self.X.ndim != 2:
            raise DimensionError(f"X must be 2-D, got shape {self.X.shape}")
        for name, arr in (("y", self.y), ("ids", self.ids), ("canary_slot", self.canary_slot)):
            if arr.shape != (n,):
                raise DimensionError(f"{name} must have shape ({n},), got {arr.shape}")
        if len(np.unique(self.ids)) != n:
            raise DimensionError("example ids must be unique")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.X[idx], self.y[idx], self.ids[idx], self.canary_slot[idx])

    @staticmethod
    def from_examples(examples: list[Example]) -> "Dataset":
        if not examples:
            raise DimensionError("cannot build a dataset from zero examples")
        X = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
        y = np.array([e.label for e in examples], dtype=np.int64)
        ids = np.array([e.example_id for e in examples], dtype=np.int64)
        slot = np.full(len(examples), -1, dtype=np.int64)
        next_slot = 0
        for i, e in enumerate(examples):
            if e.is_canary:
                slot[i] = next_slot
                next_slot += 1
        return Dataset(X, y, ids, slot)

    def to_examples(self) -> list[Example]:
        return [
            Example(self.X[i].copy(), int(self.y[i]), bool(self.canary_slot[i] >= 0), int(self.ids[i]))
            for i in range(len(self))
        ]


def synth_gaussians(
    classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    id_start: int = 0,
) -> Dataset:
    """Sample a Gaussian-blob classification dataset inside the unit cube.

    Class means are drawn once from U[0.25, 0.75]^dim, points are means plus
    isotropic N(0, spread^2) noise, and all features are clipped to [0, 1].
    The same (classes, dim, per_class, spread, seed) always yields the same
    arrays. With spread=0 every point sits exactly on its class mean.
    """
    if classes < 2:
        raise DimensionError("need at least 2 classes")
    if spread < 0:
        raise DimensionError("spread must be non-negative")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x6D0D))))
    means = rng.uniform(0.25, 0.75, size=(classes, dim))
    n = classes * per_class
    y = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    X = means[y] + spread * rng.standard_normal((n, dim))
    np.clip(X, 0.0, 1.0, out=X)
    perm = rng.permutation(n)
    ids = np.arange(id_start, id_start + n, dtype=np.int64)
    return Dataset(X[perm], y[perm], ids)


def synth_two_moons(per_class: int, noise: float, seed: int, id_start: int = 0) -> Dataset:
    """Sample the two interleaved half-circles dataset, rescaled to [0, 1]^2."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x3A00))))
    t = rng.uniform(0.0, np.pi, size=per_class)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    t2 = rng.uniform(0.0, np.pi, size=per_class)
    lower = np.stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)], axis=1)
    X = np.concatenate([upper, lower]) + noise * rng.standard_normal((2 * per_class, 2))
    y = np.repeat(np.arange(2, dtype=np.int64), per_class)
    # map the moons' bounding box into the unit square
    X = (X - X.min(axis=0)) / np.maximum(X.max(axis=0) - X.min(axis=0), 1e-12)
    perm = rng.permutation(2 * per_class)
    ids = np.arange(id_start, id_start + 2 * per_class, dtype=np.int64)
    return Dataset(X[perm], y[perm], ids)


def ingest_cifar_binary(path: str, downscale: int = 1, id_start: int = 0) -> Dataset:
    """Read an image dataset stored as fixed-size binary records.

    Each record is one label byte followed by 3072 image bytes (3 channels of
    32x32, channel-major). Pixels are scaled by 1/255 into [0, 1]. With
    ``downscale`` > 1 each channel is mean-pooled over non-overlapping
    (downscale x downscale) blocks, so the feature count becomes
    3 * (32/downscale)^2.

    Raises:
        FormatError: if the file length is not a multiple of the record size
            (reporting the byte offset of the truncated record) or a label
            byte exceeds 9.
    """
    if downscale < 1 or 32 % downscale != 0:
        raise DimensionError("downscale must be a divisor of 32")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise FormatError("empty image file", offset=0)
    if raw.size % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"file length {raw.size} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size",
            offset=raw.size - (raw.size % CIFAR_RECORD_BYTES),
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > CIFAR_MAX_LABEL)[0]
    if bad.size:
        first = int(bad[0])
        raise FormatError(
            f"label byte {int(labels[first])} exceeds {CIFAR_MAX_LABEL} in record {first}",
            offset=first * CIFAR_RECORD_BYTES,
        )
    imgs = records[:, 1:].astype(np.float64) / 255.0
    n = imgs.shape[0]
    imgs = imgs.reshape(n, 3, 32, 32)
    if downscale > 1:
        s = 32 // downscale
        imgs = imgs.reshape(n, 3, s, downscale, s, downscale).mean(axis=(3, 5))
    X = imgs.reshape(n, -1)
    ids = np.arange(id_start, id_start + n, dtype=np.int64)
    return Dataset(X, labels, ids)
