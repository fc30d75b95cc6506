"""Datasets: synthetic tasks, Dirichlet client partitioning, IDX/CSV ingestion."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples as one feature array (first axis indexes samples) plus labels."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = np.asarray(self.features).view()
        labels = np.asarray(self.labels, dtype=np.int64).view()
        if len(features) != len(labels):
            raise DataError(f"{len(features)} feature rows but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        return self.features[i], int(self.labels[i])

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.class_count)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def cap(self, total: int, seed: int = 0) -> Dataset:
        """Uniform random subset of ``total`` samples (no-op if already small enough)."""
        if total >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), total, replace=False))
        return self.subset(idx)


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTaskSpec:
    family: str = "vit"
    class_count: int = 10
    samples_per_class: int = 100
    feature_dim: int = 16          # mlp family
    image_size: int = 32           # vit family
    channels: int = 3
    shift: float = 0.0
    noise: float = 0.2
    separation: float = 1.0
    prototype_seed: int = 0

    def __post_init__(self):
        if self.family not in ("mlp", "vit"):
            raise ConfigError(f"unknown synthetic family {self.family!r}")
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError(f"shift must lie in [0, 1], got {self.shift}")
        if self.class_count < 1 or self.samples_per_class < 1:
            raise ConfigError("class_count and samples_per_class must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _blob_means(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.prototype_seed, 1])
    means = rng.standard_normal((spec.class_count, spec.feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= spec.separation
    if spec.shift:
        # rotate every prototype inside one fixed random plane
        basis, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, 2)))
        u, v = basis[:, 0], basis[:, 1]
        a = spec.shift * np.pi / 2
        pu, pv = means @ u, means @ v
        means = means + np.outer(pu * (np.cos(a) - 1) - pv * np.sin(a), u) \
            + np.outer(pu * np.sin(a) + pv * (np.cos(a) - 1), v)
    return means


def _grating_params(spec: SyntheticTaskSpec):
    rng = np.random.default_rng([spec.prototype_seed, 2])
    c = spec.class_count
    theta = np.pi * (np.arange(c) + rng.uniform(-0.15, 0.15, c)) / c
    freq = 1.5 + (np.arange(c) % 3) + rng.uniform(-0.2, 0.2, c)
    color = rng.uniform(0.2, 1.0, (c, spec.channels))
    color /= np.linalg.norm(color, axis=1, keepdims=True)
    theta = theta + spec.shift * np.pi / 2
    color = (1 - spec.shift) * color + spec.shift * np.roll(color, 1, axis=1)
    return theta, freq, color


def make_synthetic(spec: SyntheticTaskSpec, seed: int = 0) -> Dataset:
    """Class-balanced synthetic dataset; ``spec.shift`` perturbs the class generators.

    The mlp family draws Gaussian blobs around per-class prototypes.  The vit
    family renders oriented sinusoidal gratings with class-specific angle,
    frequency and colour, random phase, and additive pixel noise.
    """
    rng = np.random.default_rng(seed)
    c, k = spec.class_count, spec.samples_per_class
    labels = np.repeat(np.arange(c), k)
    if spec.family == "mlp":
        means = _blob_means(spec)
        x = means[labels] + spec.noise * rng.standard_normal((c * k, spec.feature_dim))
    else:
        theta, freq, color = _grating_params(spec)
        s = spec.image_size
        yy, xx = np.meshgrid(np.arange(s) / s, np.arange(s) / s, indexing="ij")
        t, f = theta[labels][:, None, None], freq[labels][:, None, None]
        phase = rng.uniform(0, 2 * np.pi, (c * k, 1, 1))
        amp = rng.uniform(0.8, 1.2, (c * k, 1, 1))
        wave = amp * np.sin(2 * np.pi * f * (xx * np.cos(t) + yy * np.sin(t)) + phase)
        x = color[labels][:, :, None, None] * wave[:, None]
        x = x + spec.noise * rng.standard_normal(x.shape)
    order = rng.permutation(c * k)
    return Dataset(x[order].astype(np.float32), labels[order], c)


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True, eq=False)
class PartitionAssignment:
    owner: np.ndarray
    num_clients: int
    alpha: float
    seed: int

    def shards(self) -> list[np.ndarray]:
        """Sample indices per client, ascending."""
        order = np.argsort(self.owner, kind="stable")
        bounds = np.cumsum(np.bincount(self.owner, minlength=self.num_clients))[:-1]
        return np.split(order, bounds)

    def shard_sizes(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.num_clients)

    def class_counts(self, labels, class_count: int | None = None) -> np.ndarray:
        """(num_clients, class_count) matrix of per-client label counts."""
        labels = np.asarray(labels)
        c = class_count or int(labels.max()) + 1
        out = np.zeros((self.num_clients, c), dtype=np.int64)
        np.add.at(out, (self.owner, labels), 1)
        return out


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that best track ``proportions``."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def dirichlet_partition(labels, num_clients: int, alpha: float, seed: int = 0) -> PartitionAssignment:
    """Split each class across clients with Dirichlet(alpha) proportions."""
    if num_clients < 1:
        raise ValueError("num_clients must be at least 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    owner = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        p = rng.dirichlet(np.full(num_clients, float(alpha)))
        counts = largest_remainder(p, len(idx))
        idx = rng.permutation(idx)
        owner[idx] = np.repeat(np.arange(num_clients), counts)
    return PartitionAssignment(owner, num_clients, float(alpha), seed)


def label_entropy(counts: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of a count matrix; empty rows give 0."""
    counts = np.atleast_2d(counts).astype(float)
    tot = counts.sum(axis=1, keepdims=True)
    p = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
    logp = np.log(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logp).sum(axis=1)


def heterogeneity(counts: np.ndarray) -> float:
    """Mean total-variation distance between client and global label distributions."""
    counts = np.asarray(counts, dtype=float)
    sizes = counts.sum(axis=1)
    keep = sizes > 0
    local = counts[keep] / sizes[keep, None]
    glob = counts.sum(axis=0) / counts.sum()
    return float(0.5 * np.abs(local - glob).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# augmentation


def augment(sample: np.ndarray, rng: np.random.Generator, *, horizontal_flip: float = 0.0) -> np.ndarray:
    """Flip an image (last axis = width) with probability ``horizontal_flip``."""
    if horizontal_flip > 0 and rng.random() < horizontal_flip:
        return sample[..., ::-1].copy()
    return sample


def augment_batch(batch: np.ndarray, rng: np.random.Generator, *, horizontal_flip: float = 0.0) -> np.ndarray:
    if horizontal_flip <= 0:
        return batch
    flip = rng.random(len(batch)) < horizontal_flip
    if not flip.any():
        return batch
    out = batch.copy()
    out[flip] = out[flip][..., ::-1]
    return out


# ---------------------------------------------------------------------------
# file formats

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into an array of its encoded shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError("truncated IDX magic number", offset=len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim == 0:
        raise ParseError(f"bad IDX magic number 0x{raw[:4].hex()}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_TYPES[dtype_code])
    need = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < need:
        raise ParseError(f"IDX payload truncated: expected {need} bytes, got {len(raw)}",
                         offset=len(raw))
    if len(raw) > need:
        raise ParseError(f"{len(raw) - need} trailing bytes after IDX payload", offset=need)
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """MNIST-style image/label IDX pair; pixels scaled to [0, 1], shape (K, 1, H, W)."""
    for path, magic in ((images_path, IDX_IMAGES_MAGIC), (labels_path, IDX_LABELS_MAGIC)):
        with _open(path) as fh:
            head = fh.read(4)
        if len(head) == 4 and struct.unpack(">I", head)[0] != magic:
            raise ParseError(f"{path}: expected magic 0x{magic:08x}, got 0x{head.hex()}", offset=0)
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    c = class_count if class_count is not None else int(labels.max()) + 1
    x = images.astype(np.float32)[:, None] / 255.0
    return Dataset(x, labels, c)


def write_idx(path, array: np.ndarray) -> None:
    """Write ``array`` as an unsigned-byte IDX file."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_csv(path, class_count: int | None = None, shape: tuple[int, ...] | None = None) -> Dataset:
    """CSV with header ``label,f0,f1,...``; one sample per row."""
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise ParseError("CSV header must start with 'label'", line=1)
        width = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ParseError(f"expected {width + 1} fields, got {len(row)}", line=lineno)
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"unparseable value ({exc})", line=lineno) from None
            if label < 0 or (class_count is not None and label >= class_count):
                raise DataError(f"line {lineno}: label {label} outside [0, {class_count})")
            labels.append(label)
            rows.append(feats)
    x = np.asarray(rows, dtype=np.float32).reshape(len(rows), width)
    if shape is not None:
        x = x.reshape((len(rows),) + tuple(shape))
    c = class_count if class_count is not None else (max(labels) + 1 if labels else 1)
    return Dataset(x, np.asarray(labels, dtype=np.int64), c)
