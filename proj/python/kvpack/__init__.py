"""Low-rank KV-cache compression toolkit.

Thin re-export of the native module: closed-form size/FLOP accounting,
truncated SVD factorization, importance scoring, 4-bit quantization, and the
synthetic decode simulator.
"""

from ._kvpack import (
    __version__,
    assign_groups,
    compression_ratio,
    ema_update,
    explained_variance_ratio,
    partial_decompress_flops,
    quantize_roundtrip,
    rank_for_variance,
    run_simulation,
    singular_values,
    truncated_svd,
)

__all__ = [
    "__version__",
    "assign_groups",
    "compression_ratio",
    "ema_update",
    "explained_variance_ratio",
    "partial_decompress_flops",
    "quantize_roundtrip",
    "rank_for_variance",
    "run_simulation",
    "singular_values",
    "truncated_svd",
]
