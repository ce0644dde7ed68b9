"""Dataset loading and generation.

Samples are stored activation-style as x: (n, C, L) float64 with integer
labels, so the harness and context builder share one layout. Supported
sources: MNIST IDX files, a synthetic Gaussian-mixture generator with
ground-truth contexts, and generic numeric CSV.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .rng import make_rng
from .tensor_ops import assert_finite

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; the message names the offending byte offset."""


@dataclass
class Dataset:
    x: np.ndarray  # (n, C, L)
    y: np.ndarray  # (n,)
    domains: list = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim == 2:
            self.x = self.x[:, None, :]
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y disagree on sample count")
        assert_finite(self.x, "dataset features")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def n_classes(self):
        return int(self.y.max()) + 1

    def subset(self, indices):
        dom = [self.domains[i] for i in indices] if self.domains is not None else None
        return Dataset(self.x[indices], self.y[indices], domains=dom)


def _read_idx(path, expected_magic, n_dims):
    with open(path, "rb") as fh:
        buf = fh.read()
    header = 4 + 4 * n_dims
    if len(buf) < header:
        raise IdxFormatError(
            f"{path}: truncated header at byte {len(buf)}, need {header} bytes"
        )
    magic = int.from_bytes(buf[0:4], "big")
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}"
        )
    dims = [int.from_bytes(buf[4 + 4 * i : 8 + 4 * i], "big") for i in range(n_dims)]
    expected = header + int(np.prod(dims))
    if len(buf) < expected:
        raise IdxFormatError(
            f"{path}: truncated data, expected {expected} bytes but file ends at byte "
            f"{len(buf)} ({expected - len(buf)} missing)"
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=int(np.prod(dims)), offset=header)
    return data.reshape(dims)


def load_mnist_idx(images_path, labels_path, subset_n=None, seed=0):
    """Load MNIST-convention IDX image/label files.

    Pixels scale to [0, 1]; images flatten to (n, 1, H*W). When subset_n is
    given, the first subset_n samples after a deterministic shuffle by
    `seed` are kept.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has "
            f"{labels.shape[0]} labels"
        )
    n, h, w = images.shape
    x = (images.astype(np.float64) / 255.0).reshape(n, 1, h * w)
    y = labels.astype(np.int64)
    if subset_n is not None:
        if subset_n > n:
            raise ValueError(f"subset_n={subset_n} exceeds dataset size {n}")
        order = make_rng(seed).permutation(n)[:subset_n]
        x, y = x[order], y[order]
    return Dataset(x, y)


def gen_synthetic_gmm(n_components, n, dim, separation, rng):
    """Spherical Gaussian mixture with means on the coordinate axes.

    Component k sits at separation * e_{k mod dim} with unit variance.
    Labels equal component ids, which double as ground-truth contexts.
    Returns (dataset, true_context_ids).
    """
    if n_components < 1:
        raise ValueError("need at least one component")
    comp = rng.integers(0, n_components, size=n)
    x = rng.standard_normal((n, dim))
    means = np.zeros((n_components, dim))
    for k in range(n_components):
        means[k, k % dim] = separation
    x += means[comp]
    return Dataset(x[:, None, :], comp.copy()), comp.copy()


def load_csv_dataset(path):
    """Numeric CSV with the integer class label in the last column."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for i, row in enumerate(reader):
            if i == 0 and any(not _is_number(v) for v in row):
                continue  # header
            rows.append([float(v) for v in row])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    return Dataset(data[:, :-1][:, None, :], data[:, -1].astype(np.int64))


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False
