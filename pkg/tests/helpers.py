"""Shared test fixtures: IDX writers and a desk-scale digits corpus.

Real MNIST is not fetchable in the test environment, so the smoke
experiments run on a stand-in built from scikit-learn's bundled scans of
real handwritten digits, upsampled to the 28x28 MNIST geometry and
augmented with seeded shifts and noise, then written as byte-exact IDX
files.
"""

import numpy as np

from ctxnorm.rng import make_rng


def write_idx_images(path, images):
    """images: (n, h, w) uint8, written in MNIST IDX3 convention."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write((0x00000803).to_bytes(4, "big"))
        fh.write(n.to_bytes(4, "big"))
        fh.write(h.to_bytes(4, "big"))
        fh.write(w.to_bytes(4, "big"))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write((0x00000801).to_bytes(4, "big"))
        fh.write(labels.shape[0].to_bytes(4, "big"))
        fh.write(labels.tobytes())


def digits_28x28(n, seed=0):
    """n augmented 28x28 digit images (uint8) with labels.

    Upsamples the 8x8 scans by 3 (24x24), pads to 28x28, then applies a
    seeded +-2 pixel shift and mild pixel noise per sample.
    """
    from sklearn.datasets import load_digits

    base = load_digits()
    protos = np.kron(base.images, np.ones((3, 3)))  # (1797, 24, 24), values 0..16
    protos = np.pad(protos, ((0, 0), (2, 2), (2, 2)))
    protos = (protos * (255.0 / 16.0)).round()
    rng = make_rng(seed)
    picks = rng.integers(0, protos.shape[0], size=n)
    shifts = rng.integers(-2, 3, size=(n, 2))
    noise = rng.integers(0, 20, size=(n, 28, 28))
    images = np.empty((n, 28, 28), dtype=np.uint8)
    for i, (p, (dy, dx)) in enumerate(zip(picks, shifts)):
        img = np.roll(np.roll(protos[p], dy, axis=0), dx, axis=1)
        images[i] = np.clip(img + noise[i], 0, 255).astype(np.uint8)
    labels = base.target[picks].astype(np.uint8)
    return images, labels


def make_digits_idx(dirpath, n, seed=0):
    """Write the digits corpus as IDX files; returns (images_path, labels_path)."""
    images, labels = digits_28x28(n, seed=seed)
    images_path = str(dirpath / "digits-images-idx3-ubyte")
    labels_path = str(dirpath / "digits-labels-idx1-ubyte")
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
    return images_path, labels_path
