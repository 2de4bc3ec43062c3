"""Writer for the ``.dst`` tensor container consumed by the compression engine.

The format is the interface between the exporter and the engine, so it is
implemented here independently: an 8-byte unsigned little-endian header
length, a UTF-8 JSON header mapping tensor names to
``{"dtype", "shape", "data_offsets"}`` plus a ``"__metadata__"`` string map,
then the raw little-endian data region. Tensors are laid out contiguously in
sorted-name order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPES = {
    np.dtype(np.float32): ("F32", "<f4"),
    np.dtype(np.float64): ("F64", "<f8"),
}


def write_store(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    metadata = {str(k): str(v) for k, v in (metadata or {}).items()}
    header: dict[str, object] = {"__metadata__": metadata}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        base = np.dtype(arr.dtype.str.lstrip("<>=|"))
        if base not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        tag, wire = _DTYPES[base]
        raw = np.asarray(arr, dtype=wire, order="C").tobytes(order="C")
        header[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def save_store(path: str | Path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(write_store(tensors, metadata))
