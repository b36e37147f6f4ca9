"""Datasets, synthetic tasks and client partitioning (iid and Dirichlet label skew)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import DTYPE


@dataclass
class DatasetShard:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "DatasetShard":
        idx = np.asarray(indices, dtype=np.int64)
        return DatasetShard(self.features[idx], self.labels[idx], self.class_count)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class PartitionedDataset:
    shards: list[DatasetShard]
    indices: list[np.ndarray]
    holdout: DatasetShard | None = None
    holdout_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def n(self) -> int:
        return sum(len(s) for s in self.shards)

    def manifest_rows(self) -> list[tuple[int, int]]:
        return [(k, int(i)) for k, idx in enumerate(self.indices) for i in idx]


# -- CSV ------------------------------------------------------------------

def load_csv(path, class_count: int) -> DatasetShard:
    """Read ``label,f0,...,f{d-1}`` rows (header required)."""
    path = Path(path)
    feats, labels = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise ValueError(f"{path}: line 1: header must start with 'label'")
        d = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ValueError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if not 0 <= label < class_count:
                raise ValueError(f"{path}: line {lineno}: label {label} outside [0, {class_count})")
            labels.append(label)
            feats.append(values)
    x = np.asarray(feats, dtype=DTYPE).reshape(len(labels), d)
    return DatasetShard(x, np.asarray(labels, np.int64), class_count)


def save_csv(shard: DatasetShard, path) -> None:
    x = shard.features.reshape(len(shard), -1)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["label"] + [f"f{j}" for j in range(x.shape[1])]) + "\n")
        for label, row in zip(shard.labels, x):
            fh.write(",".join([str(int(label))] + [f"{float(v):.9g}" for v in row]) + "\n")


# -- synthetic ------------------------------------------------------------

def synth_blobs(n: int, d: int, classes: int, spread: float, seed: int,
                center_scale: float = 1.0) -> DatasetShard:
    """Isotropic Gaussian blobs (std ``spread``) around seeded normal class centers.

    Labels are balanced (``i % classes``) and shuffled.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(classes, d))
    labels = rng.permutation(np.arange(n) % classes)
    x = centers[labels] + spread * rng.normal(size=(n, d))
    return DatasetShard(x, labels, classes)


def blob_centers(d: int, classes: int, seed: int, center_scale: float = 1.0) -> np.ndarray:
    """The class centers :func:`synth_blobs` draws for the same seed."""
    return np.random.default_rng(seed).normal(scale=center_scale, size=(classes, d))


# -- partitioning ---------------------------------------------------------

def split_holdout(shard: DatasetShard, fraction: float, seed: int):
    """Seeded split into (train indices, holdout indices)."""
    rng = np.random.default_rng([seed, 0x401D])
    perm = rng.permutation(len(shard))
    n_hold = int(round(fraction * len(shard)))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _assemble(shard, parts, holdout=None, holdout_indices=None) -> PartitionedDataset:
    parts = [np.sort(np.asarray(p, np.int64)) for p in parts]
    out = PartitionedDataset([shard.subset(p) for p in parts], parts)
    if holdout is not None:
        out.holdout, out.holdout_indices = holdout, holdout_indices
    return out


def iid_partition(shard: DatasetShard, K: int, seed: int) -> PartitionedDataset:
    """Seeded shuffle then near-equal contiguous splits."""
    if K < 1 or K > len(shard):
        raise ValueError(f"cannot split {len(shard)} samples across {K} clients")
    perm = np.random.default_rng(seed).permutation(len(shard))
    return _assemble(shard, np.array_split(perm, K))


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(shard: DatasetShard, K: int, alpha: float, seed: int) -> PartitionedDataset:
    """Per class, split its samples across clients by a Dirichlet(alpha) draw.

    Clients left empty take one sample from the currently largest client.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if K > len(shard):
        raise ValueError(f"cannot give {K} clients at least one of {len(shard)} samples")
    rng = np.random.default_rng(seed)
    hist = shard.class_histogram()
    if (hist == 0).any():
        raise ValueError(f"classes {np.flatnonzero(hist == 0).tolist()} have no samples")
    parts: list[list[int]] = [[] for _ in range(K)]
    for c in range(shard.class_count):
        idx = rng.permutation(np.flatnonzero(shard.labels == c))
        p = rng.dirichlet(np.full(K, alpha))
        counts = _largest_remainder(p, len(idx))
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            parts[k].extend(chunk.tolist())
    for k in range(K):
        if not parts[k]:
            donor = max(range(K), key=lambda j: (len(parts[j]), -j))
            parts[k].append(parts[donor].pop())
    return _assemble(shard, parts)


def make_federated(shard: DatasetShard, K: int, mode: str = "iid", alpha: float = 0.1,
                   seed: int = 0, holdout_fraction: float = 0.2) -> PartitionedDataset:
    """Hold out a seeded fraction for global evaluation, partition the rest."""
    train_idx, hold_idx = split_holdout(shard, holdout_fraction, seed)
    train = shard.subset(train_idx)
    if mode == "iid":
        part = iid_partition(train, K, seed)
    elif mode == "dirichlet":
        part = dirichlet_partition(train, K, alpha, seed)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    # report indices relative to the source shard
    part.indices = [train_idx[i] for i in part.indices]
    part.holdout = shard.subset(hold_idx)
    part.holdout_indices = hold_idx
    return part


def write_manifest(part: PartitionedDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("client_id,sample_index\n")
        for k, i in part.manifest_rows():
            fh.write(f"{k},{i}\n")


def label_entropy(shard: DatasetShard) -> float:
    hist = shard.class_histogram().astype(np.float64)
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log(p)).sum())
