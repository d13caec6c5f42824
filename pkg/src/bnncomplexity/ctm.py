"""Lookup tables of per-block complexity values for 4x4 binary blocks.

A table assigns a complexity value in bits to every one of the 65536
possible 4x4 binary blocks, addressed by an unsigned 16-bit code
(row-major bit packing, bit 0 = row 0 col 0, bit 15 = row 3 col 3).
Tables are immutable after construction and safe to share across
workers.

The on-disk format is plain UTF-8 text: an optional first line
``fallback=<float>`` followed by ``<code>,<value>`` lines, one per
block, codes in any order.  Duplicates are rejected; missing codes are
rejected unless the fallback line is present.
"""

import gzip
import hashlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import IncompleteTable, InvalidBlockShape, InvalidComplexity, ParseError

BLOCK_SIDE = 4
BLOCK_BITS = BLOCK_SIDE * BLOCK_SIDE
NUM_CODES = 1 << BLOCK_BITS

# Row-major packing weights: bit (4*r + c) holds cell (r, c).
_BIT_WEIGHTS = (1 << np.arange(BLOCK_BITS, dtype=np.uint32)).astype(np.uint32)

BUNDLED_TABLE_NAME = "ctm_b2_d4x4.csv"
BUNDLED_TABLE_SHA256 = None  # populated lazily from the packaged manifest


def encode_block(block) -> int:
    """Pack a 4x4 binary block into its unsigned 16-bit code.

    Parameters
    ----------
    block : array_like
        4x4 array with values in {0, 1}.

    Returns
    -------
    int
        Row-major packed code in [0, 65536).
    """
    arr = np.asarray(block)
    if arr.shape != (BLOCK_SIDE, BLOCK_SIDE):
        raise InvalidBlockShape(f"expected a 4x4 block, got shape {arr.shape}")
    flat = arr.reshape(-1)
    if not np.isin(flat, (0, 1)).all():
        raise InvalidBlockShape("block values must be 0 or 1")
    return int(flat.astype(np.uint32) @ _BIT_WEIGHTS)


def decode_block(code: int) -> np.ndarray:
    """Unpack a 16-bit code into its 4x4 binary block (inverse of encode_block)."""
    if not 0 <= code < NUM_CODES:
        raise InvalidBlockShape(f"code {code} outside [0, {NUM_CODES})")
    bits = (np.uint32(code) >> np.arange(BLOCK_BITS, dtype=np.uint32)) & 1
    return bits.astype(np.uint8).reshape(BLOCK_SIDE, BLOCK_SIDE)


def encode_rows(rows: np.ndarray) -> np.ndarray:
    """Pack an (n, 16) array of flattened binary blocks into n codes."""
    return rows.astype(np.uint32) @ _BIT_WEIGHTS


@dataclass(frozen=True)
class CtmTable:
    """Immutable complexity table: one value in bits per 16-bit block code.

    Attributes
    ----------
    values : numpy.ndarray
        float64 array of length 65536, finite and non-negative.
    source : str
        Provenance label (file path, "synthetic:constant", ...).
    checksum : str
        SHA-256 hex digest of the backing file (or of the value array
        for synthetic tables).
    """

    values: np.ndarray
    source: str = "unknown"
    checksum: str = field(default="", compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (NUM_CODES,):
            raise InvalidComplexity(
                f"table must have exactly {NUM_CODES} entries, got {vals.shape}"
            )
        if not np.isfinite(vals).all():
            raise InvalidComplexity("table contains non-finite values")
        if (vals < 0).any():
            raise InvalidComplexity("table contains negative values")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __getitem__(self, code):
        return self.values[code]

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Vectorized lookup: complexity values for an array of codes."""
        return self.values[codes]


def _checksum_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _open_text(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_ctm_table(path) -> CtmTable:
    """Load and validate a complexity table from its text file format.

    Raises
    ------
    ParseError
        Malformed line, out-of-range code, or duplicate code.
    InvalidComplexity
        Negative or non-finite value (including the fallback).
    IncompleteTable
        Missing codes without a declared fallback.
    """
    raw = _open_text(path)
    text = raw.decode("utf-8")
    lines = text.splitlines()

    fallback = None
    start = 0
    if lines and lines[0].startswith("fallback="):
        try:
            fallback = float(lines[0][len("fallback="):])
        except ValueError as exc:
            raise ParseError(f"{path}: bad fallback line: {lines[0]!r}") from exc
        if not np.isfinite(fallback) or fallback < 0:
            raise InvalidComplexity(f"{path}: fallback value {fallback} invalid")
        start = 1

    values = np.full(NUM_CODES, np.nan)
    seen = np.zeros(NUM_CODES, dtype=bool)
    for lineno, line in enumerate(lines[start:], start + 1):
        if not line.strip():
            continue
        code_s, sep, value_s = line.partition(",")
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected 'code,value', got {line!r}")
        try:
            code = int(code_s)
            value = float(value_s)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {line!r}") from exc
        if not 0 <= code < NUM_CODES:
            raise ParseError(f"{path}:{lineno}: code {code} outside [0, {NUM_CODES})")
        if seen[code]:
            raise ParseError(f"{path}:{lineno}: duplicate code {code}")
        if not np.isfinite(value) or value < 0:
            raise InvalidComplexity(f"{path}:{lineno}: invalid complexity {value}")
        seen[code] = True
        values[code] = value

    if not seen.all():
        if fallback is None:
            missing = int((~seen).sum())
            raise IncompleteTable(
                f"{path}: {missing} codes missing and no fallback declared"
            )
        values[~seen] = fallback

    return CtmTable(values=values, source=str(path), checksum=_checksum_bytes(raw))


def write_ctm_table(table: CtmTable, path) -> str:
    """Write a table in the text file format; returns the file's checksum.

    Values are serialized with ``repr`` so a load/write round trip is
    bit-exact.
    """
    lines = [f"{code},{float(value)!r}" for code, value in enumerate(table.values)]
    data = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)
    return _checksum_bytes(data)


def synthetic_table(kind: str, c: float = 1.0) -> CtmTable:
    """Analytically simple tables used as oracles in tests.

    ``constant(c)`` assigns c to every code; ``popcount`` assigns
    ``1 + number_of_set_bits(code)``.
    """
    if kind == "constant":
        if not np.isfinite(c) or c < 0:
            raise InvalidComplexity(f"constant table needs c >= 0, got {c}")
        values = np.full(NUM_CODES, float(c))
        source = f"synthetic:constant({c})"
    elif kind == "popcount":
        as_bytes = np.arange(NUM_CODES, dtype=np.uint16).view(np.uint8)
        popcount = np.unpackbits(as_bytes).reshape(NUM_CODES, 16).sum(axis=1)
        values = 1.0 + popcount.astype(np.float64)
        source = "synthetic:popcount"
    else:
        raise ValueError(f"unknown synthetic table kind {kind!r}")
    return CtmTable(
        values=values, source=source, checksum=_checksum_bytes(values.tobytes())
    )


def convert_reference_csv(src, dst) -> str:
    """Convert a row-string complexity table to the code-keyed format.

    Reference BDM tooling distributes 4x4 tables as lines
    ``rrrr-rrrr-rrrr-rrrr,<value>`` where each r is a '0'/'1' character
    and rows are top to bottom.  Writes the converted table to ``dst``
    and returns its checksum.  Missing blocks stay missing (the output
    declares no fallback), so loading enforces completeness.
    """
    raw = _open_text(src)
    values = np.full(NUM_CODES, np.nan)
    seen = np.zeros(NUM_CODES, dtype=bool)
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value_s = line.partition(",")
        rows = key.split("-")
        if not sep or len(rows) != BLOCK_SIDE or any(len(r) != BLOCK_SIDE for r in rows):
            raise ParseError(f"{src}:{lineno}: expected 'rrrr-rrrr-rrrr-rrrr,value'")
        try:
            block = [[int(ch) for ch in row] for row in rows]
            value = float(value_s)
        except ValueError as exc:
            raise ParseError(f"{src}:{lineno}: {line!r}") from exc
        code = encode_block(block)
        if seen[code]:
            raise ParseError(f"{src}:{lineno}: duplicate block {key}")
        if not np.isfinite(value) or value < 0:
            raise InvalidComplexity(f"{src}:{lineno}: invalid complexity {value}")
        seen[code] = True
        values[code] = value

    lines = [f"{code},{float(values[code])!r}" for code in range(NUM_CODES) if seen[code]]
    data = ("\n".join(lines) + "\n").encode("utf-8")
    with open(dst, "wb") as fh:
        fh.write(data)
    return _checksum_bytes(data)


def bundled_table_info() -> dict:
    """Manifest of the table shipped with the package (name, sha256, notes)."""
    import json

    with resources.files("bnncomplexity.tables").joinpath("manifest.json").open() as fh:
        return json.load(fh)


def load_bundled_table() -> CtmTable:
    """Load the packaged 4x4 table and verify its recorded checksum."""
    ref = resources.files("bnncomplexity.tables").joinpath(BUNDLED_TABLE_NAME)
    with resources.as_file(ref) as path:
        table = load_ctm_table(path)
    expected = bundled_table_info()["sha256"]
    if table.checksum != expected:
        raise ParseError(
            f"bundled table checksum mismatch: {table.checksum} != {expected}"
        )
    return table
