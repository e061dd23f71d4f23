"""Embedding backbones.

Two encoders share one interface: ``OpenClipEncoder`` wraps the real
OpenCLIP models and is imported lazily so the package works without
torch installed, and ``StubEncoder`` produces deterministic content-hash
pseudo-embeddings for offline tests and pipeline dry runs.

Both return unit-norm float32 rows; identical inputs always produce
identical vectors.
"""

from __future__ import annotations

import hashlib
import unicodedata
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

# Output dimension per supported backbone.
BACKBONES = {"ViT-B/32": 512, "ViT-L/14": 768}

# OpenCLIP spells the slash as a dash in its model registry.
_OPEN_CLIP_NAMES = {"ViT-B/32": "ViT-B-32", "ViT-L/14": "ViT-L-14"}

DEFAULT_PRETRAINED = "openai"


class BackboneUnavailable(RuntimeError):
    """The requested encoder cannot run in this environment."""


class Encoder(Protocol):
    dim: int
    weights: str

    def encode_images(self, paths: Sequence[str | Path]) -> np.ndarray: ...

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray: ...


def _unit(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1, keepdims=True)
    return (rows / np.maximum(norms, 1e-30)).astype(np.float32)


class StubEncoder:
    """Hash-seeded gaussian vectors standing in for a real backbone.

    The vector for an image is a pure function of the file bytes, and
    the vector for a text is a pure function of its NFC-normalized
    UTF-8 encoding. That gives exact self-similarity and stable stores
    across machines, but no cross-modal alignment.
    """

    def __init__(self, backbone: str):
        if backbone not in BACKBONES:
            raise BackboneUnavailable(f"unknown backbone {backbone!r}")
        self.backbone = backbone
        self.dim = BACKBONES[backbone]
        self.weights = f"stub:sha256-gaussian:{self.dim}"

    def _vector(self, digest: bytes) -> np.ndarray:
        seed = int.from_bytes(digest[:8], "big")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self.dim)

    def encode_images(self, paths: Sequence[str | Path]) -> np.ndarray:
        rows = []
        for p in paths:
            digest = hashlib.sha256(Path(p).read_bytes()).digest()
            rows.append(self._vector(digest))
        return _unit(np.stack(rows))

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            normalized = unicodedata.normalize("NFC", text)
            digest = hashlib.sha256(b"text\x00" + normalized.encode("utf-8")).digest()
            rows.append(self._vector(digest))
        return _unit(np.stack(rows))


class OpenClipEncoder:
    """OpenCLIP image/text towers with the backbone's own preprocessing."""

    def __init__(self, backbone: str, pretrained: str = DEFAULT_PRETRAINED):
        if backbone not in BACKBONES:
            raise BackboneUnavailable(f"unknown backbone {backbone!r}")
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise BackboneUnavailable(
                "open_clip is not installed; install the 'clip' extra "
                "(pip install cotrr-extractor[clip]) or use --encoder stub"
            ) from exc

        self._torch = torch
        name = _OPEN_CLIP_NAMES[backbone]
        model, _, preprocess = open_clip.create_model_and_transforms(
            name, pretrained=pretrained
        )
        model.eval()
        self._model = model
        self._preprocess = preprocess
        self._tokenizer = open_clip.get_tokenizer(name)
        self.backbone = backbone
        self.dim = BACKBONES[backbone]
        self.weights = f"open_clip:{name}:{pretrained}"

    def encode_images(self, paths: Sequence[str | Path]) -> np.ndarray:
        from PIL import Image

        batch = self._torch.stack(
            [self._preprocess(Image.open(p).convert("RGB")) for p in paths]
        )
        with self._torch.no_grad():
            features = self._model.encode_image(batch)
        return _unit(features.cpu().numpy())

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        tokens = self._tokenizer(list(texts))
        with self._torch.no_grad():
            features = self._model.encode_text(tokens)
        return _unit(features.cpu().numpy())


def make_encoder(spec: str, backbone: str) -> Encoder:
    """Build an encoder from a CLI spec: ``stub`` or ``open_clip[:tag]``."""
    if spec == "stub":
        return StubEncoder(backbone)
    if spec == "open_clip":
        return OpenClipEncoder(backbone)
    if spec.startswith("open_clip:"):
        return OpenClipEncoder(backbone, pretrained=spec.split(":", 1)[1])
    raise BackboneUnavailable(
        f"unknown encoder spec {spec!r}; expected stub or open_clip[:pretrained]"
    )
