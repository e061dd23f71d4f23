"""Writer for the engine's binary embedding store format.

Layout: 8 magic bytes ``CTRREMB1``, a little-endian u32 row count, a
little-endian u32 dimension, then ``count * dim`` little-endian float32
values in row-major order. Ids go to a UTF-8 sidecar at ``<path>.ids``,
one per line. A ``<path>.meta.json`` sidecar records how the vectors
were produced so runs stay attributable to exact weights.

This module is deliberately self-contained: it implements the documented
format rather than importing the engine, so the two sides check each
other.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MAGIC = b"CTRREMB1"
_HEADER = struct.Struct("<8sII")

# Vectors with a norm this small cannot be normalized meaningfully.
_ZERO_NORM = 1e-30


class StoreWriteError(ValueError):
    """The rows or ids violate the store format contract."""


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    """Return float32 rows scaled to unit L2 norm.

    Normalization happens in float64 so the written bytes match what a
    loader recomputing the norm would accept within float32 rounding.
    """
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim != 2:
        raise StoreWriteError(f"expected a 2-D array, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise StoreWriteError("vectors contain NaN or infinite values")
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.flatnonzero(norms <= _ZERO_NORM)
    if bad.size:
        raise StoreWriteError(f"row {bad[0]} has zero norm and cannot be stored")
    return (matrix / norms[:, None]).astype(np.float32)


def ids_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids")


def meta_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.json")


def _check_ids(ids: Sequence[str], count: int) -> None:
    if len(ids) != count:
        raise StoreWriteError(f"{count} rows but {len(ids)} ids")
    seen = set()
    for i, item_id in enumerate(ids):
        if not isinstance(item_id, str) or not item_id.strip():
            raise StoreWriteError(f"id {i} is empty")
        if "\n" in item_id or "\r" in item_id:
            raise StoreWriteError(f"id {item_id!r} contains a line break")
        if item_id in seen:
            raise StoreWriteError(f"duplicate id {item_id!r}")
        seen.add(item_id)


def write_store(
    path: str | Path,
    ids: Sequence[str],
    vectors: np.ndarray,
    *,
    normalize: bool = True,
) -> None:
    """Write vectors and the id sidecar atomically.

    Rows are L2-normalized before writing unless the caller already did
    (``normalize=False`` still verifies unit norm).
    """
    path = Path(path)
    matrix = normalize_rows(vectors)
    if not normalize:
        norms = np.linalg.norm(np.asarray(vectors, dtype=np.float64), axis=1)
        off = np.flatnonzero(np.abs(norms - 1.0) > 1e-5)
        if off.size:
            raise StoreWriteError(f"row {off[0]} is not unit-norm")
    count, dim = matrix.shape
    if count == 0:
        raise StoreWriteError("store must hold at least one row")
    if dim == 0:
        raise StoreWriteError("store dimension must be positive")
    _check_ids(ids, count)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, count, dim))
        fh.write(matrix.astype("<f4").tobytes(order="C"))
    os.replace(tmp, path)

    sidecar = ids_path(path)
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    os.replace(tmp, sidecar)


def write_metadata(path: str | Path, fields: Mapping[str, object]) -> None:
    """Record provenance (backbone, weights identifier, counts) beside the store."""
    target = meta_path(path)
    payload = json.dumps(dict(fields), indent=2, sort_keys=True) + "\n"
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text(payload, encoding="utf-8")
    os.replace(tmp, target)


def read_store(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Minimal reader used by tests to verify written bytes independently."""
    path = Path(path)
    raw = path.read_bytes()
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StoreWriteError(f"bad magic {magic!r}")
    vectors = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if vectors.size != count * dim:
        raise StoreWriteError("payload size does not match header")
    ids = ids_path(path).read_text(encoding="utf-8").splitlines()
    return ids, vectors.reshape(count, dim)
