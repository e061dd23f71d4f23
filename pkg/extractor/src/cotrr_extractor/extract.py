"""Batch embedding extraction into the engine's store format."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import BACKBONES, Encoder
from .storewriter import StoreWriteError, write_metadata, write_store

log = logging.getLogger(__name__)


class ListingError(ValueError):
    """An input listing or caption file is malformed."""


@dataclass(frozen=True)
class ExtractionJob:
    """One extraction run: what to embed, with which backbone, to where."""

    backbone: str
    listing: Path
    out: Path
    kind: str = "images"  # images | texts
    batch_size: int = 32

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ListingError(
                f"unknown backbone {self.backbone!r}; "
                f"expected one of {sorted(BACKBONES)}"
            )
        if self.kind not in ("images", "texts"):
            raise ListingError(f"kind must be images or texts, got {self.kind!r}")
        if self.batch_size < 1:
            raise ListingError("batch size must be at least 1")

    @property
    def dim(self) -> int:
        return BACKBONES[self.backbone]


@dataclass(frozen=True)
class ExtractionResult:
    count: int
    dim: int
    skipped: tuple[str, ...] = field(default_factory=tuple)


def read_image_listing(path: Path) -> list[tuple[str, Path]]:
    """Parse an image listing: one path per line, or ``id<TAB>path``.

    Default ids are the file stem. Row order follows the listing.
    """
    entries: list[tuple[str, Path]] = []
    root = path.parent
    for raw in path.read_text(encoding="utf-8").splitlines():
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        # a tab anywhere marks the id<TAB>path form, even with blank parts
        if "\t" in raw:
            item_id, rel = raw.split("\t", 1)
            item_id, rel = item_id.strip(), rel.strip()
            if not item_id or not rel:
                raise ListingError(f"{path}: malformed listing line {raw!r}")
        else:
            rel = raw.strip()
            item_id = Path(rel).stem
        target = Path(rel)
        if not target.is_absolute():
            target = root / target
        entries.append((item_id, target))
    if not entries:
        raise ListingError(f"{path}: listing holds no entries")
    return entries


def read_caption_file(path: Path) -> list[tuple[str, str]]:
    """Parse captions: JSON-lines ``{"id", "text"}`` or ``id<TAB>text`` rows."""
    entries: list[tuple[str, str]] = []
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("{"):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ListingError(f"{path}: line {n} is not valid JSON") from exc
            item_id, text = obj.get("id"), obj.get("text")
        elif "\t" in line:
            item_id, text = (part.strip() for part in line.split("\t", 1))
        else:
            raise ListingError(f"{path}: line {n} has neither JSON nor a tab")
        if not isinstance(item_id, str) or not item_id:
            raise ListingError(f"{path}: line {n} is missing an id")
        if not isinstance(text, str) or not text:
            raise ListingError(f"{path}: line {n} is missing text")
        entries.append((item_id, text))
    if not entries:
        raise ListingError(f"{path}: caption file holds no entries")
    return entries


def _check_dim(rows: np.ndarray, job: ExtractionJob) -> None:
    # Dimension drift means the wrong weights were loaded; never write it.
    if rows.shape[1] != job.dim:
        raise StoreWriteError(
            f"backbone {job.backbone} must produce dim {job.dim}, "
            f"encoder returned {rows.shape[1]}"
        )


def extract_embeddings(job: ExtractionJob, encoder: Encoder) -> ExtractionResult:
    """Embed the listing in order and write the store plus its sidecars.

    Unreadable images are skipped with a warning and their ids omitted,
    so the sidecar always matches the rows actually written. A dimension
    mismatch between the declared backbone and the encoder is fatal.
    """
    if encoder.dim != job.dim:
        raise StoreWriteError(
            f"encoder dim {encoder.dim} does not match backbone "
            f"{job.backbone} (dim {job.dim})"
        )

    ids: list[str] = []
    chunks: list[np.ndarray] = []
    skipped: list[str] = []

    if job.kind == "images":
        entries = read_image_listing(job.listing)
        batch_ids: list[str] = []
        batch_paths: list[Path] = []

        def flush():
            if batch_paths:
                rows = encoder.encode_images(batch_paths)
                _check_dim(rows, job)
                chunks.append(rows)
                ids.extend(batch_ids)
                batch_ids.clear()
                batch_paths.clear()

        for item_id, image_path in entries:
            try:
                with open(image_path, "rb") as fh:
                    fh.read(1)
            except OSError as exc:
                log.warning("skipping %s: %s", item_id, exc)
                skipped.append(item_id)
                continue
            batch_ids.append(item_id)
            batch_paths.append(image_path)
            if len(batch_paths) >= job.batch_size:
                flush()
        flush()
    else:
        entries = read_caption_file(job.listing)
        for start in range(0, len(entries), job.batch_size):
            batch = entries[start : start + job.batch_size]
            rows = encoder.encode_texts([text for _, text in batch])
            _check_dim(rows, job)
            chunks.append(rows)
            ids.extend(item_id for item_id, _ in batch)

    if not ids:
        raise ListingError(f"{job.listing}: no readable entries remain")

    matrix = np.vstack(chunks)
    write_store(job.out, ids, matrix)
    write_metadata(
        job.out,
        {
            "format": "CTRREMB1",
            "backbone": job.backbone,
            "weights": encoder.weights,
            "kind": job.kind,
            "count": len(ids),
            "dim": job.dim,
            "skipped": skipped,
            "source": str(job.listing),
        },
    )
    return ExtractionResult(count=len(ids), dim=job.dim, skipped=tuple(skipped))
