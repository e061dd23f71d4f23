"""Embedding stores and exact cosine top-K retrieval.

The on-disk vector format is bit-exact: 8 magic bytes ``CTRREMB1``, a
little-endian u32 row count, a little-endian u32 dimension, then
``count * dim`` little-endian IEEE-754 float32 values in row-major order.
Ids live in a UTF-8 sidecar at ``<path>.ids``, one per line, exactly
``count`` lines.

Rows are L2-normalized once at load, so retrieval is a pure dot product.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"CTRREMB1"
_HEADER = struct.Struct("<8sII")

# Rows are divided by their float64 norm; anything this small is a zero row.
_ZERO_NORM = 1e-30


class StoreFormatError(ValueError):
    """A vector file or its id sidecar is malformed.

    ``code`` identifies the failure: ``bad_magic``, ``zero_count``,
    ``zero_dim``, ``size_mismatch``, ``missing_sidecar``, ``empty_id``,
    ``id_count_mismatch``, ``duplicate_id``, ``zero_norm_row``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class DimensionMismatch(ValueError):
    """Query vector dimension does not match the store dimension."""


class ZeroNormQuery(ValueError):
    """Query vector has (near-)zero L2 norm."""


@dataclass(frozen=True)
class Candidate:
    """One retrieved item: id, 1-based initial rank, cosine score."""

    id: str
    initial_rank: int
    score: float


@dataclass(frozen=True)
class EmbeddingStore:
    """Immutable id-indexed matrix of unit-norm float32 embeddings."""

    ids: tuple[str, ...]
    vectors: np.ndarray
    dim: int
    normalized: bool = True
    _index: dict = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_index", {i: r for r, i in enumerate(self.ids)})

    @property
    def count(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def vector_for(self, item_id: str) -> np.ndarray:
        """Row for ``item_id``; KeyError if absent."""
        return self.vectors[self._index[item_id]]


def ids_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids")


def load_store(path: str | Path) -> EmbeddingStore:
    """Load a vector file plus its id sidecar and L2-normalize the rows.

    Raises StoreFormatError (with a specific ``code``) on any structural
    problem; see the class docstring for the full list.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise StoreFormatError("bad_magic", f"{path}: not a CTRREMB1 vector file")
    _, count, dim = _HEADER.unpack_from(raw)
    if count == 0:
        raise StoreFormatError("zero_count", f"{path}: header declares zero rows")
    if dim == 0:
        raise StoreFormatError("zero_dim", f"{path}: header declares zero dimension")
    expected = _HEADER.size + 4 * count * dim
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise StoreFormatError(
            "size_mismatch",
            f"{path}: {kind} payload ({len(raw)} bytes, expected {expected} "
            f"for {count}x{dim})",
        )
    vectors = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim)

    sidecar = ids_path(path)
    if not sidecar.exists():
        raise StoreFormatError("missing_sidecar", f"{sidecar}: id sidecar not found")
    text = sidecar.read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    ids = text.split("\n") if text else []
    if any(i == "" for i in ids):
        raise StoreFormatError("empty_id", f"{sidecar}: blank id line")
    if len(ids) != count:
        raise StoreFormatError(
            "id_count_mismatch",
            f"{sidecar}: {len(ids)} ids for {count} vector rows",
        )
    seen = set()
    for i in ids:
        if i in seen:
            raise StoreFormatError("duplicate_id", f"{sidecar}: duplicate id {i!r}")
        seen.add(i)

    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    zero = np.where(norms < _ZERO_NORM)[0]
    if zero.size:
        raise StoreFormatError(
            "zero_norm_row", f"{path}: zero-norm row at index {int(zero[0])}"
        )
    unit = (vectors.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingStore(ids=tuple(ids), vectors=unit, dim=dim)


def write_store(path: str | Path, ids: Sequence[str], vectors: np.ndarray) -> None:
    """Write vectors + id sidecar in the bit-exact format (test/fixture aid)."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
    if arr.ndim != 2 or arr.shape[0] != len(ids):
        raise ValueError("vectors must be a 2-D array with one row per id")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes(order="C"))
    ids_path(path).write_text("\n".join(ids) + "\n", encoding="utf-8")


def top_k(store: EmbeddingStore, query_vec: Sequence[float], k: int) -> list[Candidate]:
    """Exact top-``k`` rows by cosine similarity, best first.

    Ties break by ascending store row index, so results are deterministic
    across runs and platforms. Scores are dot products accumulated in
    float64 over the unit-normalized rows.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query_vec, dtype=np.float64).ravel()
    if q.size != store.dim:
        raise DimensionMismatch(
            f"query dim {q.size} does not match store dim {store.dim}"
        )
    norm = float(np.linalg.norm(q))
    if norm < _ZERO_NORM:
        raise ZeroNormQuery("query vector has zero norm")
    q = q / norm

    scores = np.empty(store.count, dtype=np.float64)
    step = 8192
    for start in range(0, store.count, step):
        block = store.vectors[start : start + step]
        scores[start : start + step] = block.astype(np.float64) @ q

    order = np.argsort(-scores, kind="stable")[: min(k, store.count)]
    return [
        Candidate(
            id=store.ids[row],
            initial_rank=rank + 1,
            score=float(np.clip(scores[row], -1.0, 1.0)),
        )
        for rank, row in enumerate(order.tolist())
    ]
