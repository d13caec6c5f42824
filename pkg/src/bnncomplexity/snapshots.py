"""Optional per-step persistence of binarized weight matrices.

Binary framing, all integers little-endian:

    header:  8-byte magic ``BNNSNAP1``, u32 matrix count M
    record:  u64 step index, then M matrices, each
             u32 rows, u32 cols, rows * ceil(cols / 8) packed bit bytes
             (row-major; within a byte, bit k holds column 8*b + k)

Bits are the binarized weights (> 0 -> 1).  Files are append-only and
written by their owning run only.
"""

import struct
from pathlib import Path

import numpy as np

from .complexity import binarize

MAGIC = b"BNNSNAP1"


class SnapshotWriter:
    def __init__(self, path, matrix_count=3):
        self.path = Path(path)
        self.matrix_count = matrix_count
        self._fh = open(self.path, "wb")
        self._fh.write(MAGIC + struct.pack("<I", matrix_count))

    def append(self, step: int, weight_matrices):
        if len(weight_matrices) != self.matrix_count:
            raise ValueError(
                f"expected {self.matrix_count} matrices, got {len(weight_matrices)}"
            )
        out = [struct.pack("<Q", step)]
        for w in weight_matrices:
            bits = binarize(w)
            rows, cols = bits.shape
            packed = np.packbits(bits, axis=1, bitorder="little")
            out.append(struct.pack("<II", rows, cols))
            out.append(packed.tobytes())
        self._fh.write(b"".join(out))

    def close(self):
        self._fh.close()


def read_snapshots(path):
    """Yield (step, [binary matrices]) records from a snapshot file."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a snapshot file")
    (count,) = struct.unpack("<I", raw[8:12])
    pos = 12
    while pos < len(raw):
        (step,) = struct.unpack("<Q", raw[pos : pos + 8])
        pos += 8
        mats = []
        for _ in range(count):
            rows, cols = struct.unpack("<II", raw[pos : pos + 8])
            pos += 8
            row_bytes = (cols + 7) // 8
            packed = np.frombuffer(
                raw, dtype=np.uint8, count=rows * row_bytes, offset=pos
            ).reshape(rows, row_bytes)
            pos += rows * row_bytes
            bits = np.unpackbits(packed, axis=1, bitorder="little")[:, :cols]
            mats.append(bits)
        yield step, mats
