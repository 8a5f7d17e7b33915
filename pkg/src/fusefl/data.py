"""Datasets: IDX loading, Dirichlet label-skew partitioning, synthetic SEM data and backdoor stamping."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    CountMismatchError,
    EmptyDatasetError,
    PartitionError,
    TruncatedFileError,
)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
PATTERN_LIBRARY_SEED = 0x5EED_BD01


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.inputs):
            raise ConfigError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        meta = {k: v[idx] for k, v in self.meta.items() if isinstance(v, np.ndarray) and len(v) == len(self)}
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, meta)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ----------------------------------------------------------------------------
# IDX files

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> tuple[list[int], bytes]:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: truncated header")
    dims = list(struct.unpack(f">{ndim}I", raw[4:header]))
    body = raw[header:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise TruncatedFileError(f"{what}: expected {need} data bytes, found {len(body)}")
    return dims, body[:need]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped) into [N, 1, rows, cols] floats in [0, 1]."""
    (n_img, rows, cols), pix = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, "images")
    (n_lab,), lab = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if n_img != n_lab:
        raise CountMismatchError(f"count mismatch: {n_img} images vs {n_lab} labels")
    if n_img == 0:
        raise EmptyDatasetError("empty dataset")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n_img, 1, rows, cols) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    c = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(images, labels, c)


def load_idx_labels(labels_path) -> np.ndarray:
    """Read just an IDX label file (enough to partition a dataset)."""
    (n,), lab = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if n == 0:
        raise EmptyDatasetError("empty dataset")
    return np.frombuffer(lab, dtype=np.uint8).astype(np.int64)


def write_idx(images: np.ndarray, labels: Sequence[int], images_path, labels_path) -> None:
    """Write uint8 images [N, rows, cols] and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


# ----------------------------------------------------------------------------
# Dirichlet partitioning

@dataclass
class Partition:
    client_indices: list[np.ndarray]
    alpha: float
    seed: int
    attempts: int = 1
    scheme: str = "per-class proportions across clients"

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def split(self, dataset: Dataset) -> list[Dataset]:
        return [dataset.subset(idx) for idx in self.client_indices]

    def histograms(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[idx], minlength=num_classes) for idx in self.client_indices])


def _labels_of(data) -> tuple[np.ndarray, int]:
    if isinstance(data, Dataset):
        return data.labels, data.num_classes
    labels = np.asarray(data, dtype=np.int64)
    return labels, int(labels.max()) + 1 if len(labels) else 0


def dirichlet_partition(dataset, num_clients: int, alpha: float, seed: int, min_per_client: int = 256,
                        max_attempts: int = 100) -> Partition:
    """Split sample indices among clients with per-class Dirichlet(alpha) proportions.

    ``dataset`` may be a Dataset or a bare label array. The whole split is
    redrawn (with a fresh derived seed) until every client holds at least
    ``min_per_client`` samples.
    """
    if num_clients < 1:
        raise ConfigError("number of clients must be >= 1")
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    labels, num_classes = _labels_of(dataset)
    if len(labels) == 0:
        raise PartitionError("cannot partition an empty dataset")
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in range(num_classes):
            idx = np.flatnonzero(labels == c)
            if idx.size == 0:
                continue
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for m, part in enumerate(np.split(idx, cuts)):
                buckets[m].append(part)
        clients = [np.sort(np.concatenate(b)) if b else np.zeros(0, np.int64) for b in buckets]
        if min(len(c) for c in clients) >= max(min_per_client, 1):
            return Partition(clients, float(alpha), seed, attempt + 1)
    raise PartitionError(
        f"could not give every one of {num_clients} clients >= {min_per_client} samples "
        f"after {max_attempts} resamples (alpha={alpha})"
    )


def label_tv_distance(partition: Partition, labels, num_classes: int) -> float:
    """Mean total-variation distance between each client's label distribution and the global one."""
    labels = np.asarray(labels)
    assigned = np.concatenate(partition.client_indices).astype(np.int64)
    glob = np.bincount(labels[assigned], minlength=num_classes) / len(assigned)
    hist = partition.histograms(labels, num_classes).astype(np.float64)
    local = hist / hist.sum(axis=1, keepdims=True)
    return float(np.mean(0.5 * np.abs(local - glob).sum(axis=1)))


# ----------------------------------------------------------------------------
# synthetic SEM data: Y -> R_inv -> X <- R_spu

@dataclass(frozen=True)
class SemConfig:
    num_classes: int = 10
    inv_dim: int = 16
    spu_dim: int = 16
    spurious_strength: float = 0.9
    noise_std: float = 1.0
    samples_per_client: int = 300
    num_clients: int = 5
    alpha: float | None = None
    test_size: int = 2000
    inv_scale: float = 1.0
    spu_scale: float = 1.0
    min_per_client: int = 20
    image_side: int | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.inv_dim < 0 or self.spu_dim < 0 or self.inv_dim + self.spu_dim < 1:
            raise ConfigError("feature dims must be non-negative with a positive total")
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ConfigError("spurious_strength must be in [0, 1]")
        if self.noise_std < 0 or self.samples_per_client < 1 or self.num_clients < 1 or self.test_size < 1:
            raise ConfigError("noise_std, samples_per_client, num_clients and test_size must be positive")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.image_side is not None and self.image_side ** 2 != self.inv_dim + self.spu_dim:
            raise ConfigError("image_side**2 must equal inv_dim + spu_dim")

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.image_side is not None:
            return (1, self.image_side, self.image_side)
        return (self.inv_dim + self.spu_dim,)


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(n) % c
    rng.shuffle(y)
    return y


def synth_sem(cfg: SemConfig, seed: int) -> tuple[list[Dataset], Dataset]:
    """Generate per-client training sets and a global test set.

    Each sample is ``[inv_template[y]; spu] + noise``. On client m the
    spurious block is that client's template for class y with probability
    ``spurious_strength``, otherwise its template for a uniformly random
    class. In the test set the spurious template comes from a random client
    and random class, independent of the label.
    """
    rng = np.random.default_rng(seed)
    c, m_count = cfg.num_classes, cfg.num_clients
    inv_t = rng.normal(size=(c, cfg.inv_dim)) * cfg.inv_scale
    spu_t = rng.normal(size=(m_count, c, cfg.spu_dim)) * cfg.spu_scale

    pool = _balanced_labels(cfg.samples_per_client * m_count, c, rng)
    if cfg.alpha is None:
        order = rng.permutation(len(pool))
        parts = np.array_split(order, m_count)
    else:
        part = dirichlet_partition(pool, m_count, cfg.alpha, int(rng.integers(2**63)), cfg.min_per_client)
        parts = part.client_indices

    def make(labels, spu_client, spu_class, r):
        x = np.concatenate([inv_t[labels], spu_t[spu_client, spu_class]], axis=1)
        x = x + cfg.noise_std * r.normal(size=x.shape)
        if cfg.image_side is not None:
            x = x.reshape(len(labels), 1, cfg.image_side, cfg.image_side)
        meta = {"spu_client": spu_client, "spu_class": spu_class}
        return Dataset(x, labels, c, meta)

    clients = []
    for m, idx in enumerate(parts):
        r = np.random.default_rng([seed, 1, m])
        y = pool[idx]
        keep = r.random(len(y)) < cfg.spurious_strength
        spu_class = np.where(keep, y, r.integers(0, c, size=len(y)))
        clients.append(make(y, np.full(len(y), m), spu_class, r))

    r = np.random.default_rng([seed, 2])
    y_test = _balanced_labels(cfg.test_size, c, r)
    test = make(y_test, r.integers(0, m_count, size=cfg.test_size), r.integers(0, c, size=cfg.test_size), r)
    return clients, test


def concat(datasets: Sequence[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([d.inputs for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        datasets[0].num_classes,
    )


# ----------------------------------------------------------------------------
# backdoor stamping

@dataclass(frozen=True)
class BackdoorConfig:
    target_clients: tuple[int, ...] = (0,)
    patch_side: int = 10
    intensity_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        if self.patch_side < 0:
            raise ConfigError("patch_side must be non-negative")
        lo, hi = self.intensity_range
        if lo > hi:
            raise ConfigError("intensity_range must be [lo, hi] with lo <= hi")

    def validate(self, num_clients: int) -> None:
        if any(not 0 <= t < num_clients for t in self.target_clients):
            raise ConfigError(f"backdoor target clients {self.target_clients} outside [0, {num_clients})")


def pattern_library(num_classes: int, side: int) -> np.ndarray:
    """Fixed, distinct, non-empty binary masks of shape (num_classes, side, side)."""
    rng = np.random.default_rng([PATTERN_LIBRARY_SEED, num_classes, side])
    masks = np.zeros((num_classes, side, side), dtype=bool)
    seen: set[bytes] = set()
    for c in range(num_classes):
        while True:
            m = rng.random((side, side)) < 0.5
            key = m.tobytes()
            if m.any() and key not in seen:
                seen.add(key)
                masks[c] = m
                break
    return masks


def inject_backdoor(dataset: Dataset, bd: BackdoorConfig, seed: int) -> Dataset:
    """Return a copy with each image's top-left patch stamped with its label's pattern.

    Stamped pixels take one random intensity per sample; everything else is
    left untouched.
    """
    x = dataset.inputs
    if x.ndim != 4:
        raise ConfigError(f"backdoor needs image inputs [N, C, H, W], got shape {x.shape}")
    s = bd.patch_side
    if s > x.shape[2] or s > x.shape[3]:
        raise ConfigError(f"patch side {s} larger than image {x.shape[2]}x{x.shape[3]}")
    out = x.copy()
    if s > 0 and len(dataset):
        masks = pattern_library(dataset.num_classes, s)
        rng = np.random.default_rng(seed)
        lo, hi = bd.intensity_range
        vals = rng.uniform(lo, hi, size=len(dataset))
        patch = out[:, :, :s, :s]
        sel = masks[dataset.labels][:, None, :, :]
        sel = np.broadcast_to(sel, patch.shape)
        stamped = np.broadcast_to(vals[:, None, None, None], patch.shape)
        patch[sel] = stamped[sel]
    return replace(dataset, inputs=out, meta=dict(dataset.meta))
