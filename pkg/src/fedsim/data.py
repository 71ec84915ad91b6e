"""Datasets: synthetic Gaussian mixtures, Dirichlet client partitions, IDX files."""

from __future__ import annotations

from dataclasses import dataclass, field
import os
import struct

import numpy as np


class FormatError(ValueError):
    """A binary input file does not match the expected layout."""


@dataclass
class Dataset:
    """Feature matrix (N x d, float64) with integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.features.shape[0]} rows"
            )
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature entries")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(
                f"labels outside [0, {self.num_classes}): "
                f"range [{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ClientDataset:
    """One client's local shard plus its exact empirical label distribution."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    label_dist: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.features.shape[0],) or self.features.shape[0] == 0:
            raise ValueError(f"client {self.client_id}: empty or mismatched shard")
        if self.label_dist is None:
            self.label_dist = empirical_label_dist(self.labels, self.num_classes)
        else:
            self.label_dist = np.asarray(self.label_dist, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across clients (label-skewed Dirichlet)."""

    num_clients: int
    delta: float = 0.3
    balanced: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not (self.delta > 0):
            raise ValueError(f"delta must be positive, got {self.delta}")


def empirical_label_dist(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class sample fractions; exact counts divided by the shard size."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty label set has no label distribution")
    return np.bincount(labels, minlength=num_classes) / labels.size


def gen_synthetic_mixture(num_classes: int, dim: int, n_per_class: int,
                          spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs, one per class, means drawn once from the seed.

    Every sample of class c is ``mean_c + spread * N(0, I)``; with spread 0
    samples equal the class mean exactly. Rows are grouped by class.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if spread < 0:
        raise ValueError(f"spread must be >= 0, got {spread}")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    features = np.repeat(means, n_per_class, axis=0)
    if spread > 0:
        features = features + spread * rng.normal(size=features.shape)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    return Dataset(features, labels, num_classes)


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Standardize features per dimension using training-split statistics.

    Zero-variance dimensions are left unscaled (divisor 1) so constant
    features stay finite.
    """
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    out = []
    for ds in (train, *others):
        out.append(Dataset((ds.features - mean) / std, ds.labels, ds.num_classes))
    return tuple(out)


def mixture_train_test(num_classes: int, dim: int, train_per_class: int,
                       test_per_class: int, spread: float, seed: int
                       ) -> tuple[Dataset, Dataset]:
    """Train/test mixture pair sharing class means, standardized by train stats."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    labels_tr = np.repeat(np.arange(num_classes, dtype=np.int64), train_per_class)
    labels_te = np.repeat(np.arange(num_classes, dtype=np.int64), test_per_class)
    feat_tr = means[labels_tr] + spread * rng.normal(size=(labels_tr.size, dim))
    feat_te = means[labels_te] + spread * rng.normal(size=(labels_te.size, dim))
    train = Dataset(feat_tr, labels_tr, num_classes)
    test = Dataset(feat_te, labels_te, num_classes)
    return standardize(train, test)


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Label-skewed balanced partition driven by per-client Dirichlet draws.

    Each client draws class proportions from Dir(delta * 1_C). Quotas of
    N/K samples are then filled from per-class index pools with multinomial
    draws on those proportions, renormalized over nonempty pools. Clients
    take turns drawing small chunks so pool exhaustion squeezes everyone a
    little instead of dumping the whole correction on whichever client is
    scheduled last. Deterministic in (dataset, spec.seed).
    """
    if not spec.balanced:
        raise ValueError("only balanced partitions are supported")
    K = spec.num_clients
    if ds.n % K != 0:
        raise ValueError(
            f"dataset size {ds.n} is not divisible by {K} clients; "
            "balanced partitioning needs equal shards"
        )
    quota = ds.n // K
    C = ds.num_classes
    rng = np.random.default_rng(spec.seed)

    pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(C)]
    remaining = np.array([p.size for p in pools], dtype=np.int64)
    proportions = rng.dirichlet(np.full(C, spec.delta), size=K)

    take = np.zeros((K, C), dtype=np.int64)
    need = np.full(K, quota, dtype=np.int64)
    chunk = max(1, quota // 64)
    while need.any():
        for k in range(K):
            if need[k] == 0:
                continue
            avail = remaining > 0
            w = np.where(avail, proportions[k], 0.0)
            total = w.sum()
            if total > 0.0:
                w = w / total
            else:
                # Dirichlet mass sits entirely on exhausted classes; fall back
                # to uniform over whatever is left.
                w = avail / avail.sum()
            counts = np.minimum(
                rng.multinomial(min(chunk, int(need[k])), w), remaining)
            take[k] += counts
            remaining -= counts
            need[k] -= int(counts.sum())

    offsets = np.zeros(C, dtype=np.int64)
    clients = []
    for k in range(K):
        idx = np.concatenate([
            pools[c][offsets[c]:offsets[c] + take[k, c]]
            for c in range(C) if take[k, c] > 0
        ])
        offsets += take[k]
        clients.append(ClientDataset(
            client_id=k,
            features=ds.features[idx],
            labels=ds.labels[idx],
            num_classes=C,
        ))
    return clients


# --- IDX (big-endian ubyte) files -------------------------------------------

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset 0 (file has {len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x} at byte offset 0, "
            f"expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(
            f"{path}: truncated dimension header at byte offset {len(raw)} "
            f"(need {header_end} bytes)"
        )
    shape = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(shape, dtype=np.int64))
    payload = raw[header_end:]
    if len(payload) != count:
        raise FormatError(
            f"{path}: payload of {len(payload)} bytes at byte offset {header_end} "
            f"does not match dimensions {shape} ({count} bytes expected)"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def _companion_labels_path(images_path: str) -> str:
    base = os.path.basename(images_path)
    cand = base.replace("images", "labels").replace("idx3", "idx1")
    if cand == base:
        raise ValueError(
            f"cannot derive a label-file name from {images_path!r}; "
            "pass labels_path explicitly"
        )
    return os.path.join(os.path.dirname(images_path), cand)


def load_idx(images_path: str, labels_path: str | None = None) -> Dataset:
    """Load an IDX image/label file pair as a flat-feature Dataset.

    Pixels are scaled to [0, 1]. If ``labels_path`` is omitted it is derived
    by the usual naming convention (images->labels, idx3->idx1).
    """
    if labels_path is None:
        labels_path = _companion_labels_path(images_path)
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    n = images.shape[0]
    features = images.reshape(n, -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(features, labels, int(labels.max()) + 1 if n else 1)
