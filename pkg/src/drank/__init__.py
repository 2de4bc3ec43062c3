"""Dynamic-rank, activation-whitened, grouped truncated-SVD weight compression.

Weight matrices are grouped across layers, whitened by the triangular factor
of their input Gram statistics, and factored into a shared basis plus
per-layer coefficients. Retained ranks are allocated across groups by
spectral-entropy effective rank under a fixed parameter budget, with part of
the Q/K budget rebalanced to V.
"""

from . import allocator, compressor, effective_rank, linalg, pipeline, rebalance, tensor_store, whitening

__version__ = "0.1.0"

__all__ = [
    "allocator",
    "compressor",
    "effective_rank",
    "linalg",
    "pipeline",
    "rebalance",
    "tensor_store",
    "whitening",
    "__version__",
]
