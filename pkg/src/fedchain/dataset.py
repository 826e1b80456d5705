"""Data ingestion: CIFAR-10 binary batches, synthetic blobs, IID partitioning."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DataShard:
    """Features in [0, 1] (one row per example) with integer class labels.

    Also used as an ``ExampleBatch``; a batch is just a small shard.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise DatasetError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> DataShard:
        idx = np.asarray(indices, dtype=np.int64)
        return DataShard(self.features[idx], self.labels[idx], self.class_count)


# ---------------------------------------------------------------- CIFAR-10

def read_cifar_file(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch into (uint8 pixels [n, 3072], uint8 labels [n])."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CIFAR-10 batch not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD != 0:
        raise DatasetError(
            f"truncated record in {path}: {raw.size} bytes is not a multiple of {CIFAR_RECORD}"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].copy()
    if labels.size and labels.max() > 9:
        raise DatasetError(f"label byte {labels.max()} out of range in {path}")
    return records[:, 1:].copy(), labels


def write_cifar_file(path: str | os.PathLike, pixels: np.ndarray, labels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    np.hstack([labels, pixels]).tofile(path)


def _to_shard(pixels: np.ndarray, labels: np.ndarray) -> DataShard:
    # float32 keeps the 50k x 3072 training matrix at ~600 MB
    feats = pixels.astype(np.float32) / np.float32(255.0)
    return DataShard(feats, labels.astype(np.int64), 10)


def load_cifar10(dir_path: str | os.PathLike) -> tuple[DataShard, DataShard]:
    d = Path(dir_path)
    parts = [read_cifar_file(d / name) for name in CIFAR_TRAIN_FILES]
    test_px, test_lb = read_cifar_file(d / CIFAR_TEST_FILE)
    train_px = np.concatenate([p for p, _ in parts])
    train_lb = np.concatenate([lb for _, lb in parts])
    return _to_shard(train_px, train_lb), _to_shard(test_px, test_lb)


# ---------------------------------------------------------------- synthetic

def _class_centers(C: int, dim: int, margin: float, gen: np.random.Generator) -> np.ndarray:
    # Centers sit on a common sphere, so argmax_i <c_i, x> recovers the class
    # of any point within margin/2 of its own center.
    if C == 1:
        return np.zeros((1, dim))
    if dim == 1 and C > 2:
        raise DatasetError("dim=1 supports at most 2 separable classes")
    radius = margin
    for _ in range(1000):
        dirs = gen.normal(size=(C, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = radius * dirs
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= margin:
            return centers
        radius *= 1.05
    raise DatasetError(f"could not place {C} centers in dim={dim}")


def gen_synthetic(
    n: int, C: int, dim: int, margin: float, seed: int
) -> tuple[DataShard, DataShard]:
    """Gaussian blobs, one per class, linearly separable by construction.

    Noise is clipped to 0.4 * margin so blobs never cross the separating
    hyperplanes. Labels cycle 0..C-1, so ``n == C`` yields one example per
    class. Features are affinely rescaled into [0, 1]; 20% go to the test split.
    """
    if dim < 1:
        raise DatasetError(f"dim must be >= 1, got {dim}")
    if C < 1 or n < C:
        raise DatasetError(f"need n >= C >= 1, got n={n}, C={C}")
    if not margin > 0:
        raise DatasetError(f"margin must be positive, got {margin}")
    gen = rng(seed, 0x5EED)
    centers = _class_centers(C, dim, margin, gen)
    labels = np.arange(n) % C
    noise = gen.normal(scale=margin / 8.0, size=(n, dim))
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    cap = 0.4 * margin
    noise = np.where(norms > cap, noise * (cap / np.maximum(norms, 1e-300)), noise)
    x = centers[labels] + noise
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    x = np.clip(x, 0.0, 1.0)

    order = gen.permutation(n)
    n_test = max(1, int(round(0.2 * n))) if n > 1 else 0
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    full = DataShard(x, labels.astype(np.int64), C)
    return full.subset(train_idx), full.subset(test_idx)


# ---------------------------------------------------------------- partition

@dataclass(frozen=True)
class PartitionPlan:
    peer_count: int
    assignment: tuple[np.ndarray, ...]
    strategy: str = "iid_equal"
    seed: int = 0
    sizes: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(len(a) for a in self.assignment))

    def shards(self, data: DataShard) -> list[DataShard]:
        return [data.subset(idx) for idx in self.assignment]


def partition(shard: DataShard, N: int, strategy: str = "iid_equal", seed: int = 0) -> PartitionPlan:
    if strategy != "iid_equal":
        raise DatasetError(f"unknown partition strategy {strategy!r}")
    if N < 1:
        raise DatasetError(f"peer count must be >= 1, got {N}")
    rows = len(shard)
    if N > rows:
        raise DatasetError(f"cannot split {rows} rows across {N} peers")
    order = rng(seed, 0xDA7A).permutation(rows)
    assignment = tuple(np.sort(order[k::N]) for k in range(N))
    return PartitionPlan(N, assignment, strategy, seed)
