"""Datasets, non-IID client partitioning, train/test splits and label noise."""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from superfed.errors import DataFormatError

log = logging.getLogger(__name__)

__all__ = [
    "LabeledDataset",
    "Partition",
    "ClientSplit",
    "NoiseKind",
    "TransitionMatrix",
    "load_idx",
    "gen_blobs",
    "partition_pathological",
    "partition_dirichlet",
    "split_train_test",
    "build_transition",
    "apply_noise",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"features {x.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.isfinite(x).all():
            raise ValueError("features contain non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def with_labels(self, labels: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features, labels, self.class_count)


# ---------------------------------------------------------------- ingestion


def _read_idx(path: Path, magic: int, header_ints: int) -> tuple[list[int], bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    header_len = 4 * (1 + header_ints)
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} of {header_len} bytes)")
    found, *dims = struct.unpack(f">{1 + header_ints}I", raw[:header_len])
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    expected = math.prod(dims)
    payload = raw[header_len:]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    return dims, payload


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair (MNIST layout); pixels are scaled to [0, 1]."""
    (n_img, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), label_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise DataFormatError(f"{n_img} images but {n_lab} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n_img, rows * cols) / 255.0
    y = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if class_count is None:
        class_count = int(y.max()) + 1 if y.size else 1
    return LabeledDataset(x, y, class_count)


def gen_blobs(
    class_count: int,
    dims: int,
    per_class: int,
    spread: float,
    rng: np.random.Generator,
    center_scale: float = 1.0,
) -> LabeledDataset:
    """Isotropic Gaussian blob per class around a random standard-normal center.

    Examples come out grouped by class.
    """
    if min(class_count, dims, per_class) < 1:
        raise ValueError("class_count, dims and per_class must all be >= 1")
    centers = center_scale * rng.standard_normal((class_count, dims))
    noise = rng.standard_normal((class_count, per_class, dims))
    x = (centers[:, None, :] + spread * noise).reshape(-1, dims)
    y = np.repeat(np.arange(class_count), per_class)
    return LabeledDataset(x, y, class_count)


# ---------------------------------------------------------------- partitioning


@dataclass
class Partition:
    """Client index sets plus the indices that fit no whole shard or quota."""

    clients: list[np.ndarray]
    dropped: np.ndarray

    def __len__(self) -> int:
        return len(self.clients)

    def __iter__(self):
        return iter(self.clients)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.clients[i]


def partition_pathological(
    ds: LabeledDataset,
    client_count: int,
    rng: np.random.Generator,
    shards_per_client: int = 2,
) -> Partition:
    """Sort by label, cut into equal contiguous shards, deal shards out at random."""
    n_shards = shards_per_client * client_count
    if client_count < 1:
        raise ValueError("client_count must be >= 1")
    if n_shards > len(ds):
        raise ValueError(f"{n_shards} shards requested from only {len(ds)} examples")
    order = np.argsort(ds.labels, kind="stable")
    shard_size = len(ds) // n_shards
    used = shard_size * n_shards
    shards = order[:used].reshape(n_shards, shard_size)
    dropped = np.sort(order[used:])
    if dropped.size:
        log.info("pathological partition dropped %d remainder examples", dropped.size)
    perm = rng.permutation(n_shards)
    clients = [
        np.sort(shards[perm[i * shards_per_client : (i + 1) * shards_per_client]].ravel())
        for i in range(client_count)
    ]
    return Partition(clients, dropped)


def _largest_remainder(total: int, p: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` that track ``total * p`` as closely as possible."""
    raw = total * p
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(
    ds: LabeledDataset,
    client_count: int,
    alpha: float,
    rng: np.random.Generator,
) -> Partition:
    """Per-client label proportions drawn from a symmetric Dirichlet.

    Every client gets a quota of ``n // client_count`` examples, split across
    classes in proportion to its own draw (largest-remainder rounding). Any
    share that an exhausted class pool cannot cover is reallocated with the
    proportions renormalized over the classes that still have examples.
    """
    if client_count < 1:
        raise ValueError("client_count must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    k = ds.class_count
    pools = [list(rng.permutation(np.flatnonzero(ds.labels == c))) for c in range(k)]
    quota = len(ds) // client_count
    clients = []
    for _ in range(client_count):
        p = rng.dirichlet(np.full(k, alpha))
        taken: list[int] = []
        need = quota
        while need:
            avail = np.array([len(pool) > 0 for pool in pools])
            q = np.where(avail, p, 0.0)
            if q.sum() <= 0.0:
                # the proportion vector puts (numerically) no mass on any remaining class
                q = avail.astype(np.float64)
            counts = _largest_remainder(need, q / q.sum())
            for c in np.flatnonzero(counts):
                grab = min(int(counts[c]), len(pools[c]))
                taken.extend(pools[c][:grab])
                del pools[c][:grab]
                need -= grab
        clients.append(np.sort(np.asarray(taken, dtype=np.int64)))
    dropped = np.sort(np.asarray([i for pool in pools for i in pool], dtype=np.int64))
    if dropped.size:
        log.info("dirichlet partition dropped %d remainder examples", dropped.size)
    return Partition(clients, dropped)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class ClientSplit:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    train_indices: np.ndarray
    test_indices: np.ndarray


def split_train_test(
    ds: LabeledDataset,
    indices,
    rng: np.random.Generator,
    fraction: float = 0.2,
    client_id: int = 0,
) -> ClientSplit:
    """Shuffle ``indices``; the last ``ceil(fraction * n)`` become the test split."""
    idx = np.asarray(indices, dtype=np.int64)
    n = idx.size
    if not 0.0 < fraction < 1.0:
        raise ValueError("test fraction must lie in (0, 1)")
    if n < 2:
        raise ValueError(f"client {client_id} has {n} examples; at least 2 are needed")
    # the epsilon keeps e.g. 0.2 * 15 = 3.0000000000000004 from rounding up to 4
    n_test = min(max(math.ceil(fraction * n - 1e-9), 1), n - 1)
    shuffled = idx[rng.permutation(n)]
    train_idx, test_idx = shuffled[: n - n_test], shuffled[n - n_test :]
    return ClientSplit(client_id, ds.subset(train_idx), ds.subset(test_idx), train_idx, test_idx)


# ---------------------------------------------------------------- label noise


class NoiseKind(enum.Enum):
    NONE = "none"
    PAIR = "pair"
    SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic ``T[i, j] = P(noisy label j | clean label i)``."""

    entries: np.ndarray
    kind: NoiseKind
    epsilon: float

    @property
    def class_count(self) -> int:
        return self.entries.shape[0]


def build_transition(kind, epsilon: float, class_count: int) -> TransitionMatrix:
    kind = NoiseKind(kind) if not isinstance(kind, NoiseKind) else kind
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"noise ratio must lie in [0, 1), got {epsilon}")
    if class_count < 2:
        raise ValueError("label noise needs at least two classes")
    n = class_count
    if kind is NoiseKind.NONE:
        t = np.eye(n)
    elif kind is NoiseKind.PAIR:
        t = (1.0 - epsilon) * np.eye(n)
        t[np.arange(n), (np.arange(n) + 1) % n] = epsilon
    else:
        t = np.full((n, n), epsilon / (n - 1))
        np.fill_diagonal(t, 1.0 - epsilon)
    t.setflags(write=False)
    return TransitionMatrix(t, kind, float(epsilon))


def apply_noise(labels, t: TransitionMatrix, rng: np.random.Generator) -> np.ndarray:
    """Resample every label independently from its row of ``t``."""
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= t.class_count):
        raise ValueError(f"labels must lie in [0, {t.class_count})")
    cdf = np.cumsum(t.entries, axis=1)
    u = rng.random(y.size)
    noisy = (cdf[y] <= u[:, None]).sum(axis=1)
    return np.minimum(noisy, t.class_count - 1)
