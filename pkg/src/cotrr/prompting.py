"""Versioned prompt templates and their renderer.

Templates ship with the package as UTF-8 text files using named placeholders
(``{query_text}``, ``{manipulation_text}``, ``{components}``,
``{evaluations}``, ``{k}``). Rendering is literal substitution, not
``str.format``: the templates contain JSON examples full of braces.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

TEMPLATE_NAMES = (
    "deconstruct_text",
    "deconstruct_composed",
    "evaluate",
    "evaluate_raw",
    "rank_evaluations",
    "rank_images",
    "rank_decomposed",
    "repair",
)


class PromptLibrary:
    """Loads templates from the package, optionally shadowed by a directory."""

    def __init__(self, override_dir: str | Path | None = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: dict[str, str] = {}

    def template(self, name: str) -> str:
        if name not in TEMPLATE_NAMES:
            raise KeyError(f"unknown prompt template {name!r}")
        if name not in self._cache:
            text = None
            if self.override_dir is not None:
                candidate = self.override_dir / f"{name}.txt"
                if candidate.exists():
                    text = candidate.read_text(encoding="utf-8")
            if text is None:
                text = (
                    resources.files("cotrr")
                    .joinpath("prompts", f"{name}.txt")
                    .read_text(encoding="utf-8")
                )
            self._cache[name] = text
        return self._cache[name]

    def render(self, name: str, **values) -> str:
        text = self.template(name)
        for key, value in values.items():
            placeholder = "{" + key + "}"
            if placeholder not in text:
                raise KeyError(f"template {name!r} has no placeholder {placeholder}")
            text = text.replace(placeholder, str(value))
        return text
