#!/usr/bin/env python3
"""Generate the 4x4 complexity table bundled with the package.

The published CTM datasets for 4x4 binary blocks are distributed with
external BDM tooling and are not redistributable from this repository's
build environment, so the bundled table is a deterministic structured
stand-in with the properties downstream code relies on:

  * invariant under the dihedral group of the square and under bit
    complement (16 symmetries), like the published tables;
  * anchored at 22.006706 bits for the two uniform blocks;
  * monotone in a structural-richness score (distinct rows/columns,
    distinct overlapping 2x2 tiles, popcount balance), so regular
    patterns score low and irregular ones high, spanning ~[22, 34] bits;
  * fully enumerated (all 65536 codes) with a per-class deterministic
    dither so values are generic (no accidental ties between classes).

Replace it with a genuinely published table via
``bnncomplexity.ctm.convert_reference_csv`` and point ``ctm_table`` at
the converted file; everything downstream is table-agnostic.

Usage: python scripts/make_bundled_table.py [out_dir]
"""

import hashlib
import json
import sys
from pathlib import Path

import numpy as np

ANCHOR_BITS = 22.006706   # uniform-block value of the published 4x4 tables
SPREAD_BITS = 11.8
DITHER_BITS = 0.25


def all_blocks():
    """(65536, 4, 4) uint8 array; block b of code c has bit (4r+c) at (r, c)."""
    codes = np.arange(65536, dtype=np.uint32)
    bits = (codes[:, None] >> np.arange(16, dtype=np.uint32)) & 1
    return bits.astype(np.uint8).reshape(-1, 4, 4)


def pack(blocks):
    weights = (1 << np.arange(16, dtype=np.uint32)).astype(np.uint32)
    return blocks.reshape(-1, 16).astype(np.uint32) @ weights


def canonical_codes(blocks):
    """Minimum packed code over dihedral-8 x complement per block."""
    variants = []
    for k in range(4):
        rot = np.rot90(blocks, k=k, axes=(1, 2))
        variants.append(rot)
        variants.append(rot[:, :, ::-1])
    canon = np.full(blocks.shape[0], 2**32 - 1, dtype=np.uint32)
    for var in variants:
        for img in (var, 1 - var):
            canon = np.minimum(canon, pack(img))
    return canon


def distinct_count(rows):
    """Number of distinct values per row of a 2D integer array."""
    s = np.sort(rows, axis=1)
    return 1 + (np.diff(s, axis=1) != 0).sum(axis=1)


def structure_score(blocks):
    """Structural richness in [0, 1]: 0 for uniform blocks, ~1 for noise."""
    n = blocks.shape[0]
    weights4 = (1 << np.arange(4, dtype=np.uint32)).astype(np.uint32)

    row_nibbles = blocks.astype(np.uint32) @ weights4            # (n, 4)
    col_nibbles = blocks.transpose(0, 2, 1).astype(np.uint32) @ weights4
    rd = (distinct_count(row_nibbles) - 1) / 3.0
    cd = (distinct_count(col_nibbles) - 1) / 3.0

    tiles = np.empty((n, 9), dtype=np.uint32)
    k = 0
    for r in range(3):
        for c in range(3):
            t = blocks[:, r:r + 2, c:c + 2].reshape(n, 4)
            tiles[:, k] = t.astype(np.uint32) @ weights4
            k += 1
    td = (distinct_count(tiles) - 1) / 8.0

    p = blocks.reshape(n, 16).sum(axis=1) / 16.0
    with np.errstate(divide="ignore", invalid="ignore"):
        balance = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    balance = np.nan_to_num(balance)

    return 0.25 * rd + 0.25 * cd + 0.35 * td + 0.15 * balance


def class_dither(canon_code, score):
    digest = hashlib.sha256(b"bnnc-table-v1:%d" % canon_code).digest()
    u = int.from_bytes(digest[:8], "little") / 2.0**64
    return DITHER_BITS * u * min(1.0, 4.0 * score)


def main(out_dir):
    blocks = all_blocks()
    canon = canonical_codes(blocks)
    score_all = structure_score(blocks)
    score = score_all[canon]                     # score of the class representative

    dither = np.array([class_dither(int(c), float(s)) for c, s in zip(canon, score)])
    values = np.round(ANCHOR_BITS + SPREAD_BITS * score + dither, 6)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "ctm_b2_d4x4.csv"
    data = ("\n".join(f"{code},{float(v)!r}" for code, v in enumerate(values)) + "\n").encode()
    table_path.write_bytes(data)
    sha = hashlib.sha256(data).hexdigest()

    manifest = {
        "name": table_path.name,
        "sha256": sha,
        "entries": 65536,
        "units": "bits",
        "generator": "scripts/make_bundled_table.py",
        "kind": "structured surrogate (not the published CTM dataset)",
        "symmetries": "dihedral-8 x complement",
        "uniform_block_bits": ANCHOR_BITS,
        "range_bits": [float(values.min()), float(values.max())],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {table_path} sha256={sha}")
    print(f"value range: [{values.min():.6f}, {values.max():.6f}]")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/bnncomplexity/tables")
