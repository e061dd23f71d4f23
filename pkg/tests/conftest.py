import json
from pathlib import Path

import pytest

from cotrr.backend import Backend
from cotrr.fixtures import materialize_images

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "fixtures" / "oracle200"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    """The bundled 200-query fixture, with images materialized."""
    materialize_images(FIXTURE_DIR)
    return FIXTURE_DIR


@pytest.fixture(scope="session")
def fixture_labels(fixture_dir) -> dict:
    return json.loads((fixture_dir / "labels.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def fixture_images(fixture_dir) -> Path:
    return fixture_dir / "images"


@pytest.fixture()
def backend_factory():
    def make(transport, **kwargs) -> Backend:
        kwargs.setdefault("model", "test-model")
        return Backend(transport, **kwargs)

    return make


@pytest.fixture()
def tiny_image(tmp_path) -> Path:
    from PIL import Image

    path = tmp_path / "tiny.jpg"
    Image.new("RGB", (16, 16), (40, 90, 160)).save(path, format="JPEG")
    return path
