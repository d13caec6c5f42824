import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
MNIST_DIR = REPO_ROOT / "data" / "mnist"

MNIST_FILES = {
    "train_images": MNIST_DIR / "train-images-idx3-ubyte.gz",
    "train_labels": MNIST_DIR / "train-labels-idx1-ubyte.gz",
    "test_images": MNIST_DIR / "t10k-images-idx3-ubyte.gz",
    "test_labels": MNIST_DIR / "t10k-labels-idx1-ubyte.gz",
}


@pytest.fixture(scope="session")
def mnist_paths():
    missing = [str(p) for p in MNIST_FILES.values() if not p.exists()]
    if missing:
        pytest.fail(f"bundled MNIST files missing: {missing}")
    return MNIST_FILES


def write_idx_images(path, images, gz=False):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    payload = struct.pack(">IIII", 2051, n, rows, cols) + images.tobytes()
    data = gzip.compress(payload) if gz else payload
    Path(path).write_bytes(data)


def write_idx_labels(path, labels, gz=False):
    labels = np.asarray(labels, dtype=np.uint8)
    payload = struct.pack(">II", 2049, len(labels)) + labels.tobytes()
    data = gzip.compress(payload) if gz else payload
    Path(path).write_bytes(data)
