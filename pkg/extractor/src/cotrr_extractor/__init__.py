"""Extractor producing the re-ranking engine's inputs from raw assets."""

from .convert import SchemaDriftError, convert_manifest, write_manifest
from .encoders import BACKBONES, BackboneUnavailable, OpenClipEncoder, StubEncoder
from .extract import ExtractionJob, ExtractionResult, extract_embeddings
from .storewriter import StoreWriteError, write_metadata, write_store

__all__ = [
    "BACKBONES",
    "BackboneUnavailable",
    "ExtractionJob",
    "ExtractionResult",
    "OpenClipEncoder",
    "SchemaDriftError",
    "StoreWriteError",
    "StubEncoder",
    "convert_manifest",
    "extract_embeddings",
    "write_manifest",
    "write_metadata",
    "write_store",
]

__version__ = "0.1.0"
