"""Synthetic datasets, MNIST IDX ingestion and seeded minibatch streams."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .model import Architecture, loss_and_gradient

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncation, count mismatch)."""


@dataclass
class Dataset:
    """Paired input/label matrices; immutable by convention after creation."""

    inputs: np.ndarray   # (M, d)
    labels: np.ndarray   # (M, c)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if self.labels.shape[0] == 1 and self.inputs.shape[0] != 1:
            self.labels = self.labels.T
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs vs "
                             f"{self.labels.shape[0]} labels")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.labels))):
            raise ValueError("dataset contains NaN or Inf entries")

    @property
    def n_items(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_label_components(self) -> int:
        return self.labels.shape[1]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices])

    def to_csv(self, path) -> None:
        """Header row x0..x_{d-1}, y0..y_{c-1}; one item per row."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(self.n_features)]
                            + [f"y{i}" for i in range(self.n_label_components)])
            for x, y in zip(self.inputs, self.labels):
                writer.writerow([repr(float(v)) for v in x]
                                + [repr(float(v)) for v in y])


def make_harmonic(a: float) -> Dataset:
    """One-item dataset (sqrt(a), 0): a 1-input linear net with zero bias
    then has loss a * theta^2."""
    if not a > 0:
        raise ValueError(f"prefactor must be positive, got {a}")
    return Dataset(np.array([[np.sqrt(a)]]), np.array([[0.0]]))


def make_two_clusters(n_points: int, seed: int,
                      cluster_std: float = 1.0,
                      relative_noise: float = 0.1) -> Dataset:
    """Two Gaussian clusters in 2-d at (2,2) labelled +1 and (-2,-2)
    labelled -1, each coordinate then scaled by (1 + relative_noise * g)."""
    if n_points % 2 != 0:
        raise ValueError(f"n_points must be even, got {n_points}")
    rng = np.random.default_rng(seed)
    half = n_points // 2
    centers = np.array([[2.0, 2.0], [-2.0, -2.0]])
    points = np.concatenate([
        centers[0] + cluster_std * rng.standard_normal((half, 2)),
        centers[1] + cluster_std * rng.standard_normal((half, 2)),
    ])
    points = points * (1.0 + relative_noise * rng.standard_normal(points.shape))
    labels = np.concatenate([np.ones(half), -np.ones(half)])
    return Dataset(points, labels[:, None])


def make_gaussian_model(n: int, eig_lo: float, eig_hi: float,
                        seed: int) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Rank-1 factor dataset for the quadratic target w^T C w.

    A random symmetric matrix supplies a uniformly random orthogonal
    eigenbasis V; the eigenvalues are replaced by the equidistant grid on
    [eig_lo, eig_hi] (endpoints included).  Items are x_i = sqrt(L_i) V_i
    with zero labels, so sum_i (w.x_i)^2 = w^T V diag(L) V^T w.

    Returns (dataset, eigenvalues, eigenvectors); eigenvector j is
    column j.
    """
    if n < 2:
        raise ValueError(f"dimension must be >= 2, got {n}")
    if not (0 < eig_lo < eig_hi):
        raise ValueError(f"need 0 < eig_lo < eig_hi, got {eig_lo}, {eig_hi}")
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    sym = (m + m.T) / 2.0
    try:
        _, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigendecomposition failed: {exc}") from exc
    eigenvalues = np.linspace(eig_lo, eig_hi, n)
    factors = np.sqrt(eigenvalues)[None, :] * vecs      # column j scaled
    dataset = Dataset(factors.T, np.zeros((n, 1)))
    return dataset, eigenvalues, vecs


def _read_exact(fh, count, path, what):
    data = fh.read(count)
    if len(data) != count:
        raise IdxFormatError(
            f"{path}: truncated while reading {what} at offset {fh.tell() - len(data)}"
            f" (wanted {count} bytes, got {len(data)})")
    return data


def _read_idx(path, expected_magic, expected_dims):
    with open(path, "rb") as fh:
        magic, = struct.unpack(">i", _read_exact(fh, 4, path, "magic"))
        if magic != expected_magic:
            raise IdxFormatError(
                f"{path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{expected_magic:08x}")
        dims = struct.unpack(
            f">{expected_dims}i",
            _read_exact(fh, 4 * expected_dims, path, "dimensions"))
        count = int(np.prod(dims))
        raw = np.frombuffer(_read_exact(fh, count, path, "payload"), dtype=np.uint8)
        if fh.read(1):
            raise IdxFormatError(f"{path}: trailing bytes after offset {4 + 4 * expected_dims + count}")
    return dims, raw


def write_idx_images(path, images: np.ndarray) -> None:
    """Write a (count, rows, cols) uint8 array in IDX image format."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    """Write a (count,) uint8 array in IDX label format."""
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def filter_two_classes(dataset: Dataset, digits: tuple[int, int]) -> Dataset:
    """Keep one-hot rows of the two given classes, re-encoded as 2-class
    one-hot (first digit -> (1,0))."""
    d0, d1 = digits
    cls = np.argmax(dataset.labels, axis=1)
    keep = (cls == d0) | (cls == d1)
    labels = np.zeros((int(keep.sum()), 2))
    labels[cls[keep] == d0, 0] = 1.0
    labels[cls[keep] == d1, 1] = 1.0
    return Dataset(dataset.inputs[keep], labels)


def load_mnist_idx(images_path, labels_path,
                   two_class_filter: tuple[int, int] | None = None) -> Dataset:
    """Load an IDX image/label file pair.

    Pixels are scaled to [0, 1]; labels are one-hot over 10 classes, or
    over 2 classes when two_class_filter=(d0, d1) is given.
    """
    dims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    count, rows, cols = dims
    ldims, raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if ldims[0] != count:
        raise IdxFormatError(
            f"{labels_path}: {ldims[0]} labels but {images_path} has {count} images")
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    if np.any(raw_labels > 9):
        raise IdxFormatError(f"{labels_path}: label values above 9")
    labels = np.zeros((count, 10))
    labels[np.arange(count), raw_labels] = 1.0
    dataset = Dataset(inputs, labels)
    if two_class_filter is not None:
        dataset = filter_two_classes(dataset, two_class_filter)
    return dataset


def split_train_validation_test(train: Dataset, test: Dataset,
                                n_heldout: int = 5000) -> dict[str, Dataset]:
    """Canonical-file split: validation = the whole second file, held-out
    test = last n_heldout items of the first, train = the remainder.
    For the standard MNIST pair this yields 55000/10000/5000."""
    if n_heldout >= train.n_items:
        raise ValueError("held-out size exceeds the training file")
    cut = train.n_items - n_heldout
    return {
        "train": train.subset(slice(0, cut)),
        "validation": test,
        "test": train.subset(slice(cut, train.n_items)),
    }


class MinibatchStream:
    """Epoch-shuffled index stream: each epoch is a fresh seeded permutation
    visited once.  Identical (seed, dataset size) gives a bit-identical
    batch sequence.  When batch_size does not divide the dataset size the
    epoch ends with one short batch."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if not 1 <= batch_size <= dataset.n_items:
            raise ValueError(
                f"batch size {batch_size} not in [1, {dataset.n_items}]")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self._rng = np.random.default_rng(seed)
        self._perm = self._rng.permutation(dataset.n_items)
        self._cursor = 0

    def next_batch(self) -> np.ndarray:
        if self._cursor >= len(self._perm):
            self._perm = self._rng.permutation(self.dataset.n_items)
            self._cursor = 0
        batch = self._perm[self._cursor:self._cursor + self.batch_size]
        self._cursor += len(batch)
        return batch


def full_gradient(arch: Architecture, dataset: Dataset):
    """grad_fn over the whole dataset: theta -> (loss, grad)."""
    def grad_fn(theta):
        lg = loss_and_gradient(arch, theta, dataset.inputs, dataset.labels)
        return lg.loss, lg.grad
    return grad_fn


def minibatch_gradient(arch: Architecture, dataset: Dataset, stream: MinibatchStream):
    """grad_fn drawing one minibatch per call, rescaled by M/m."""
    def grad_fn(theta):
        idx = stream.next_batch()
        scale = dataset.n_items / len(idx)
        lg = loss_and_gradient(arch, theta, dataset.inputs[idx], dataset.labels[idx])
        return scale * lg.loss, scale * lg.grad
    return grad_fn
