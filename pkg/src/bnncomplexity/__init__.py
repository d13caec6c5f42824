"""Algorithmic complexity of binarized neural networks across training.

Measures BDM and block entropy over binarized weight matrices, trains
the binarized MLPs those measurements track, and reproduces the
correlation-with-training-loss analysis, including the random-data
control.
"""

from .complexity import (
    ComplexityReading,
    bdm,
    binarize,
    block_entropy,
    measure_network,
    partition_blocks,
)
from .ctm import (
    CtmTable,
    decode_block,
    encode_block,
    load_bundled_table,
    load_ctm_table,
    synthetic_table,
    write_ctm_table,
)

__version__ = "0.1.0"

__all__ = [
    "ComplexityReading",
    "CtmTable",
    "bdm",
    "binarize",
    "block_entropy",
    "decode_block",
    "encode_block",
    "load_bundled_table",
    "load_ctm_table",
    "measure_network",
    "partition_blocks",
    "synthetic_table",
    "write_ctm_table",
]
