"""Datasets: seeded Gaussian-cluster generator, client partitioning, IDX reader."""
from __future__ import annotations

import enum
import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    def __post_init__(self):
        for x, y in ((self.x_train, self.y_train), (self.x_test, self.y_test)):
            if len(x) != len(y):
                raise ValueError("features and labels differ in length")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError("label outside [0, num_classes)")
        if self.x_train.shape[1:] != self.x_test.shape[1:]:
            raise ValueError("train and test feature shapes differ")

    @property
    def feature_shape(self):
        return self.x_train.shape[1:]


def generate_synthetic(
    classes: int,
    dims: int,
    n_train: int,
    n_test: int,
    seed: int,
    separation: float = 3.0,
    clusters_per_class: int = 1,
    noise: float = 1.0,
) -> Dataset:
    """Gaussian clusters with seeded means.

    Each class owns ``clusters_per_class`` centres drawn from
    ``N(0, separation^2 / dims)`` per coordinate (so centre distances are
    about ``separation * sqrt(2)`` regardless of ``dims``); samples add
    isotropic noise of scale ``noise``.
    """
    if classes < 2 or dims < 1:
        raise ValueError("need classes >= 2 and dims >= 1")
    if clusters_per_class < 1:
        raise ValueError("clusters_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation / np.sqrt(dims), size=(classes, clusters_per_class, dims))

    def draw(n):
        y = rng.integers(0, classes, size=n)
        k = rng.integers(0, clusters_per_class, size=n)
        x = centres[y, k] + noise * rng.normal(size=(n, dims))
        return x, y.astype(np.int64)

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return Dataset(xtr, ytr, xte, yte, classes)


class PartitionMode(str, enum.Enum):
    IID = "iid"
    LABEL_SKEW = "label_skew"


@dataclass(frozen=True)
class PartitionSpec:
    mode: PartitionMode = PartitionMode.IID
    num_clients: int = 10
    seed: int = 0
    labels_per_client: int = 2


def partition(ds: Dataset, spec: PartitionSpec) -> list:
    """Index arrays into the train split, one per client; an exact set partition."""
    n = len(ds.y_train)
    k = spec.num_clients
    if k < 1 or k > n:
        raise ValueError(f"cannot split {n} examples over {k} clients")
    mode = PartitionMode(spec.mode)
    if mode is PartitionMode.IID:
        perm = np.random.default_rng(spec.seed).permutation(n)
        size = n // k
        cuts = [perm[i * size:(i + 1) * size] for i in range(k - 1)]
        cuts.append(perm[(k - 1) * size:])
        return [np.sort(c) for c in cuts]
    return _label_skew(ds.y_train, spec)


def _label_skew(y, spec: PartitionSpec) -> list:
    k, s = spec.num_clients, spec.labels_per_client
    labels = np.unique(y)
    pieces = k * s
    if s < 1 or pieces < len(labels):
        raise ValueError(
            f"{k} clients x {s} labels cannot cover {len(labels)} labels"
        )
    # pieces per label, as even as possible, in label order
    per_label = [len(a) for a in np.array_split(np.arange(pieces), len(labels))]
    rng = np.random.default_rng(spec.seed)
    blocks = []
    for lab, cnt in zip(labels, per_label):
        idx = np.flatnonzero(y == lab)
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < cnt:
            raise ValueError(f"label {lab} has {len(idx)} examples, needs {cnt} pieces")
        blocks.extend(np.array_split(idx, cnt))
    # consecutive pieces span at most s labels
    return [np.sort(np.concatenate(blocks[i * s:(i + 1) * s])) for i in range(k)]


class IdxError(ValueError):
    pass


class IdxBadMagic(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


def _read(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _check_magic(path, raw: bytes, want: int, what: str):
    if len(raw) < 4:
        raise IdxTruncated(f"{path}: {len(raw)} bytes, too short for a magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != want:
        raise IdxBadMagic(f"{path}: {what} magic {magic:#010x}, expected {want:#010x}")


def read_idx_images(path) -> np.ndarray:
    raw = _read(path)
    _check_magic(path, raw, IDX_IMAGES_MAGIC, "image")
    if len(raw) < 16:
        raise IdxTruncated(f"{path}: header needs 16 bytes, file has {len(raw)}")
    _, n, rows, cols = struct.unpack(">IIII", raw[:16])
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise IdxTruncated(f"{path}: {len(raw)} bytes, expected {need}")
    px = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    return px.reshape(n, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    _check_magic(path, raw, IDX_LABELS_MAGIC, "label")
    if len(raw) < 8:
        raise IdxTruncated(f"{path}: header needs 8 bytes, file has {len(raw)}")
    _, n = struct.unpack(">II", raw[:8])
    if len(raw) < 8 + n:
        raise IdxTruncated(f"{path}: {len(raw)} bytes, expected {8 + n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """MNIST-style image/label pair as a train-only dataset, pixels in [0, 1]."""
    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if len(x) != len(y):
        raise IdxCountMismatch(f"{len(x)} images but {len(y)} labels")
    empty_x = np.zeros((0,) + x.shape[1:])
    return Dataset(x, y, empty_x, np.zeros(0, dtype=np.int64), num_classes)


def write_idx(images_path, labels_path, images, labels) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())
