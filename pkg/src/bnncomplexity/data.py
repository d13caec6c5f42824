"""Dataset ingestion and experiment data preparation.

Reads IDX containers (plain or gzipped), resizes 28x28 images to 10x10
by exact box averaging, normalizes with scalar pool statistics, builds
the stratified validation split and the stratified training subsets,
and generates the uniform-noise control dataset.  Every step is a pure
function of (source bytes, seed); the manifest records enough to audit
a rerun byte for byte.
"""

import gzip
import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateData,
    FormatError,
    StratificationError,
    TruncatedError,
)

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

SOURCE_SIDE = 28
TARGET_SIDE = 10
NUM_CLASSES = 10

# Seed-stream tags: every RNG is default_rng((seed, TAG, index...)).
_TAG_VAL_SPLIT = 1
_TAG_SUBSET = 2
_TAG_CONTROL = 3


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(path) -> np.ndarray:
    """Parse an IDX file into a uint8 array (images: N x R x C, labels: N).

    Accepts gzip-compressed files transparently.  Raises FormatError on
    a wrong magic number and TruncatedError when the payload is shorter
    than the header declares.
    """
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise TruncatedError(f"{path}: shorter than an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGE_MAGIC:
        if len(raw) < 16:
            raise TruncatedError(f"{path}: image header truncated")
        n, rows, cols = struct.unpack(">III", raw[4:16])
        expected = 16 + n * rows * cols
        if len(raw) < expected:
            raise TruncatedError(
                f"{path}: {len(raw)} bytes, header declares {expected}"
            )
        if len(raw) > expected:
            raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
        return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)
    if magic == IDX_LABEL_MAGIC:
        n = struct.unpack(">I", raw[4:8])[0]
        expected = 8 + n
        if len(raw) < expected:
            raise TruncatedError(
                f"{path}: {len(raw)} bytes, header declares {expected}"
            )
        if len(raw) > expected:
            raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
        return np.frombuffer(raw, dtype=np.uint8, offset=8)
    raise FormatError(f"{path}: unknown IDX magic {magic}")


def box_weights(src: int = SOURCE_SIDE, dst: int = TARGET_SIDE) -> np.ndarray:
    """(dst, src) matrix of exact 1D box-average weights; rows sum to 1."""
    scale = src / dst
    w = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for s in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            w[i, s] = max(0.0, min(hi, s + 1) - max(lo, s)) / scale
    return w


_W10 = box_weights()


def resize_10x10(image) -> np.ndarray:
    """Box-resample one 28x28 image (values in [0, 255]) to 10x10 in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    return (_W10 @ img @ _W10.T) / 255.0


def resize_batch(images) -> np.ndarray:
    """Resize an (N, 28, 28) stack to (N, 100) flattened 10x10 images."""
    imgs = np.asarray(images, dtype=np.float64)
    out = np.einsum("is,nst,jt->nij", _W10, imgs, _W10, optimize=True) / 255.0
    return out.reshape(len(imgs), TARGET_SIDE * TARGET_SIDE)


def normalize_pool(pool: np.ndarray):
    """Center/scale by the pool's scalar pixel mean and std.

    Returns (normalized pool, mean, std); the same constants must be
    applied to validation and test data.
    """
    mean = float(pool.mean())
    std = float(pool.std())
    if std == 0.0:
        raise DegenerateData("pixel std is zero; cannot normalize")
    return (pool - mean) / std, mean, std


def apply_normalization(images: np.ndarray, mean: float, std: float) -> np.ndarray:
    return (images - mean) / std


def largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    """Apportion ``total`` proportionally to ``counts`` (largest remainder).

    Fractional parts break ties toward the lower index; the result sums
    to ``total`` and each share differs from the exact proportion by
    less than 1.
    """
    counts = np.asarray(counts, dtype=np.int64)
    exact = counts * (total / counts.sum())
    base = np.floor(exact).astype(np.int64)
    remainder = total - int(base.sum())
    frac = exact - base
    order = np.lexsort((np.arange(len(counts)), -frac))
    base[order[:remainder]] += 1
    return base


def stratified_split(labels: np.ndarray, val_size: int, seed):
    """Split indices into (validation, remainder) preserving class shares.

    Per-class validation counts follow largest-remainder apportionment;
    sampling within a class is uniform without replacement.  Returns
    sorted global index arrays.
    """
    labels = np.asarray(labels)
    if val_size > len(labels):
        raise StratificationError(
            f"validation size {val_size} exceeds pool size {len(labels)}"
        )
    rng = np.random.default_rng((seed, _TAG_VAL_SPLIT))
    counts = np.bincount(labels, minlength=NUM_CLASSES)
    quotas = largest_remainder(counts, val_size)
    chosen = []
    for cls in range(NUM_CLASSES):
        members = np.flatnonzero(labels == cls)
        if quotas[cls] > len(members):
            raise StratificationError(
                f"class {cls} has {len(members)} examples, needs {quotas[cls]}"
            )
        chosen.append(rng.choice(members, size=quotas[cls], replace=False))
    val_idx = np.sort(np.concatenate(chosen))
    mask = np.ones(len(labels), dtype=bool)
    mask[val_idx] = False
    return val_idx, np.flatnonzero(mask)


@dataclass(frozen=True)
class SubsetPlan:
    subset_id: int
    indices: np.ndarray  # positions into the pool passed to make_subsets

    def checksum(self) -> str:
        return hashlib.sha256(self.indices.astype("<i8").tobytes()).hexdigest()


def make_subsets(pool_labels: np.ndarray, count: int, size: int, seed):
    """Draw ``count`` independent stratified subsets of ``size`` examples.

    Each subset is sampled without replacement within itself (subsets
    may overlap each other) from its own RNG stream, so plans are
    deterministic and order-independent.
    """
    pool_labels = np.asarray(pool_labels)
    if size > len(pool_labels):
        raise StratificationError(
            f"subset size {size} exceeds pool size {len(pool_labels)}"
        )
    counts = np.bincount(pool_labels, minlength=NUM_CLASSES)
    quotas = largest_remainder(counts, size)
    if (quotas > counts).any():
        raise StratificationError("a class is too small for its subset quota")
    members = [np.flatnonzero(pool_labels == cls) for cls in range(NUM_CLASSES)]
    plans = []
    for sid in range(count):
        rng = np.random.default_rng((seed, _TAG_SUBSET, sid))
        picks = [
            rng.choice(members[cls], size=quotas[cls], replace=False)
            for cls in range(NUM_CLASSES)
        ]
        plans.append(SubsetPlan(sid, np.sort(np.concatenate(picks))))
    return plans


@dataclass(frozen=True)
class Dataset:
    """Flattened 10x10 images with class labels and provenance metadata."""

    images: np.ndarray  # (N, 100) float64
    labels: np.ndarray  # (N,) uint8
    source: str
    mean: float = 0.0
    std: float = 1.0


def random_control_dataset(n: int, seed) -> Dataset:
    """Uniform [0, 1) inputs with class-balanced shuffled labels."""
    rng = np.random.default_rng((seed, _TAG_CONTROL))
    images = rng.random((n, TARGET_SIDE * TARGET_SIDE))
    labels = (np.arange(n) % NUM_CLASSES).astype(np.uint8)
    rng.shuffle(labels)
    return Dataset(images=images, labels=labels, source="control", mean=0.0, std=1.0)


# --- experiment preparation ---------------------------------------------------


@dataclass(frozen=True)
class PreparedData:
    """Everything a training sweep needs, resolved to arrays."""

    mode: str                 # "mnist" or "control"
    images: np.ndarray        # (N, 100) normalized inputs
    labels: np.ndarray        # (N,)
    val_indices: np.ndarray | None
    pool_indices: np.ndarray  # candidate training indices (global)
    subsets: np.ndarray       # (count, size) global indices
    test_images: np.ndarray | None
    test_labels: np.ndarray | None
    mean: float
    std: float
    manifest: dict


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def prepare_mnist(
    train_images_path,
    train_labels_path,
    test_images_path,
    test_labels_path,
    val_size: int,
    subset_count: int,
    subset_size: int,
    seed: int,
) -> PreparedData:
    """Run the full image pipeline: parse, resize, normalize, split, subset."""
    train_images = parse_idx(train_images_path)
    train_labels = parse_idx(train_labels_path)
    test_images = parse_idx(test_images_path)
    test_labels = parse_idx(test_labels_path)
    for name, imgs, labs in (
        ("train", train_images, train_labels),
        ("test", test_images, test_labels),
    ):
        if len(imgs) != len(labs):
            raise FormatError(f"{name}: {len(imgs)} images vs {len(labs)} labels")
        if labs.max(initial=0) >= NUM_CLASSES:
            raise FormatError(f"{name}: label outside [0, {NUM_CLASSES})")

    pool = resize_batch(train_images)
    pool, mean, std = normalize_pool(pool)
    test = apply_normalization(resize_batch(test_images), mean, std)

    val_idx, rest_idx = stratified_split(train_labels, val_size, seed)
    plans = make_subsets(train_labels[rest_idx], subset_count, subset_size, seed)
    subsets = np.stack([rest_idx[p.indices] for p in plans])

    manifest = {
        "mode": "mnist",
        "seed": seed,
        "sources": {
            "train_images": {"path": str(train_images_path),
                             "sha256": _file_sha256(train_images_path)},
            "train_labels": {"path": str(train_labels_path),
                             "sha256": _file_sha256(train_labels_path)},
            "test_images": {"path": str(test_images_path),
                            "sha256": _file_sha256(test_images_path)},
            "test_labels": {"path": str(test_labels_path),
                            "sha256": _file_sha256(test_labels_path)},
        },
        "resize": f"{SOURCE_SIDE}x{SOURCE_SIDE}->{TARGET_SIDE}x{TARGET_SIDE} box average",
        "normalization": {"mean": mean, "std": std},
        "validation": {"size": int(len(val_idx)),
                       "sha256": hashlib.sha256(val_idx.astype("<i8").tobytes()).hexdigest()},
        "pool_size": int(len(rest_idx)),
        "subsets": {
            "count": subset_count,
            "size": subset_size,
            "sha256": [p.checksum() for p in plans],
        },
    }
    return PreparedData(
        mode="mnist",
        images=pool,
        labels=train_labels,
        val_indices=val_idx,
        pool_indices=rest_idx,
        subsets=subsets,
        test_images=test,
        test_labels=test_labels,
        mean=mean,
        std=std,
        manifest=manifest,
    )


def prepare_control(
    pool_size: int, subset_count: int, subset_size: int, seed: int
) -> PreparedData:
    """Generate the uniform-noise pool and its class-balanced subsets."""
    ds = random_control_dataset(pool_size, seed)
    plans = make_subsets(ds.labels, subset_count, subset_size, seed)
    subsets = np.stack([p.indices for p in plans])
    manifest = {
        "mode": "control",
        "seed": seed,
        "pool_size": pool_size,
        "inputs": "uniform[0,1), un-normalized",
        "labels": "class-balanced, shuffled",
        "subsets": {
            "count": subset_count,
            "size": subset_size,
            "sha256": [p.checksum() for p in plans],
        },
    }
    return PreparedData(
        mode="control",
        images=ds.images,
        labels=ds.labels,
        val_indices=None,
        pool_indices=np.arange(pool_size),
        subsets=subsets,
        test_images=None,
        test_labels=None,
        mean=0.0,
        std=1.0,
        manifest=manifest,
    )


def save_prepared(prepared: PreparedData, out_dir) -> None:
    """Persist arrays as .npy plus manifest.json (byte-stable across reruns)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", prepared.images)
    np.save(out / "labels.npy", prepared.labels)
    np.save(out / "pool_indices.npy", prepared.pool_indices)
    np.save(out / "subsets.npy", prepared.subsets.astype(np.int64))
    if prepared.val_indices is not None:
        np.save(out / "val_indices.npy", prepared.val_indices)
    if prepared.test_images is not None:
        np.save(out / "test_images.npy", prepared.test_images)
        np.save(out / "test_labels.npy", prepared.test_labels)
    with open(out / "manifest.json", "w") as fh:
        json.dump(prepared.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_prepared(out_dir) -> PreparedData:
    out = Path(out_dir)
    with open(out / "manifest.json") as fh:
        manifest = json.load(fh)
    mode = manifest["mode"]
    val = out / "val_indices.npy"
    test_i = out / "test_images.npy"
    norm = manifest.get("normalization", {"mean": 0.0, "std": 1.0})
    return PreparedData(
        mode=mode,
        images=np.load(out / "images.npy"),
        labels=np.load(out / "labels.npy"),
        val_indices=np.load(val) if val.exists() else None,
        pool_indices=np.load(out / "pool_indices.npy"),
        subsets=np.load(out / "subsets.npy"),
        test_images=np.load(test_i) if test_i.exists() else None,
        test_labels=np.load(out / "test_labels.npy") if test_i.exists() else None,
        mean=norm["mean"],
        std=norm["std"],
        manifest=manifest,
    )
