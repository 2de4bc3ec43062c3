"""Bit-exact container for named dense matrices (``.dst`` files).

Layout: an 8-byte unsigned little-endian header length N, then N bytes of
UTF-8 JSON mapping each tensor name to ``{"dtype", "shape", "data_offsets"}``
plus a ``"__metadata__"`` string map, then the raw little-endian data region.
Tensors are laid out contiguously in sorted-name order, so identical content
always serializes to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPES = {
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
}
_DTYPE_OF_KIND = {
    np.dtype(np.float32): "F32",
    np.dtype(np.float64): "F64",
}

METADATA_KEY = "__metadata__"


class StoreError(ValueError):
    """Malformed, inconsistent, or truncated store content."""


def element_size(dtype: str) -> int:
    try:
        return _DTYPES[dtype].itemsize
    except KeyError:
        raise StoreError(f"unsupported dtype {dtype!r}") from None


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str  # "F32" | "F64"
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def nbytes(self) -> int:
        n = element_size(self.dtype)
        for d in self.shape:
            n *= d
        return n


class TensorStore:
    """Read view over a parsed store: records, metadata, and the data region."""

    def __init__(self, records: dict[str, TensorRecord], metadata: dict[str, str], data: bytes):
        self.records = records
        self.metadata = metadata
        self._data = data

    def names(self) -> list[str]:
        return sorted(self.records)

    def __contains__(self, name: str) -> bool:
        return name in self.records

    def get(self, name: str) -> np.ndarray:
        """Decode one tensor; the returned array is a read-only view."""
        try:
            rec = self.records[name]
        except KeyError:
            raise StoreError(f"no tensor named {name!r} in store") from None
        begin, end = rec.data_offsets
        count = (end - begin) // element_size(rec.dtype)
        arr = np.frombuffer(self._data, dtype=_DTYPES[rec.dtype], count=count, offset=begin)
        return arr.reshape(rec.shape)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: self.get(name) for name in self.names()}


def _validate_array(name: str, arr: np.ndarray) -> tuple[str, np.ndarray]:
    if not isinstance(name, str) or not name:
        raise StoreError(f"tensor name must be a non-empty string, got {name!r}")
    if name == METADATA_KEY:
        raise StoreError(f"tensor name {METADATA_KEY!r} collides with the metadata key")
    arr = np.asarray(arr)
    base = np.dtype(arr.dtype.str.lstrip("<>=|"))
    if base not in _DTYPE_OF_KIND:
        raise StoreError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
    dtype = _DTYPE_OF_KIND[base]
    # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
    return dtype, np.asarray(arr, dtype=_DTYPES[dtype], order="C")


def write_store(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    """Serialize tensors and string metadata into the container byte stream."""
    metadata = dict(metadata or {})
    for k, v in metadata.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise StoreError("metadata keys and values must be strings")

    header: dict[str, object] = {METADATA_KEY: metadata}
    chunks: list[bytes] = []
    offset = 0
    seen: set[str] = set()
    for name in sorted(tensors):
        if name in seen:
            raise StoreError(f"duplicate tensor name {name!r}")
        seen.add(name)
        dtype, arr = _validate_array(name, tensors[name])
        raw = arr.tobytes(order="C")
        header[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(chunks)


def read_store(data: bytes) -> TensorStore:
    """Parse a container byte stream, validating offsets and coverage."""
    if len(data) < 8:
        raise StoreError("truncated stream: missing header length")
    (header_len,) = struct.unpack("<Q", data[:8])
    if len(data) < 8 + header_len:
        raise StoreError("truncated stream: header extends past end of data")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise StoreError("malformed header: expected a JSON object")

    region = data[8 + header_len :]
    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
    ):
        raise StoreError("malformed header: metadata must map strings to strings")

    records: dict[str, TensorRecord] = {}
    for name, entry in header.items():
        try:
            dtype = entry["dtype"]
            shape = tuple(int(d) for d in entry["shape"])
            begin, end = (int(v) for v in entry["data_offsets"])
        except (TypeError, KeyError, ValueError) as exc:
            raise StoreError(f"malformed header entry for {name!r}: {exc}") from exc
        if any(d < 0 for d in shape) or begin < 0 or end < begin:
            raise StoreError(f"malformed header entry for {name!r}: negative extent")
        rec = TensorRecord(name=name, dtype=dtype, shape=shape, data_offsets=(begin, end))
        if end - begin != rec.nbytes:
            raise StoreError(
                f"malformed header entry for {name!r}: offsets span {end - begin} bytes "
                f"but shape requires {rec.nbytes}"
            )
        if end > len(region):
            raise StoreError(f"truncated stream: tensor {name!r} ends at {end}, data region has {len(region)} bytes")
        records[name] = rec

    cursor = 0
    for rec in sorted(records.values(), key=lambda r: r.data_offsets[0]):
        begin, end = rec.data_offsets
        if begin < cursor:
            raise StoreError(f"overlap: tensor {rec.name!r} begins at {begin} inside previous record")
        if begin > cursor:
            raise StoreError(f"malformed header: gap before tensor {rec.name!r} at offset {begin}")
        cursor = end
    if cursor != len(region):
        raise StoreError(f"malformed stream: data region has {len(region)} bytes, records cover {cursor}")

    return TensorStore(records, metadata, region)


def save_store(path: str | Path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(write_store(tensors, metadata))


def load_store(path: str | Path) -> TensorStore:
    return read_store(Path(path).read_bytes())
