"""Parsers for the structured replies the model stages must produce.

Each stage demands a single fenced JSON object. Replies rarely cooperate, so
extraction first takes the last fenced block, then falls back to the longest
brace-balanced span. Parsers are total: any input either parses or raises
ParseError, never anything else.
"""

from __future__ import annotations

import json
import re
from typing import Any, Iterable, Sequence

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*[ \t]*\r?\n(.*?)```", re.DOTALL)

# Attempt limit for brace-span candidates, so adversarial input stays cheap.
_MAX_SPAN_TRIES = 40

JUDGMENT_TOKENS = (
    "no_match",
    "weak_match",
    "partial_match",
    "good_match",
    "excellent_match",
)
VERDICT_TOKENS = ("met", "partially_met", "unmet")


class ParseError(ValueError):
    """Reply text could not be parsed into the requested structure."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


def _balanced_spans(text: str) -> list[tuple[int, int]]:
    """(start, end) of every brace-balanced ``{...}`` span, string-aware."""
    spans = []
    stack: list[int] = []
    in_string = False
    escaped = False
    for pos, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            stack.append(pos)
        elif ch == "}" and stack:
            spans.append((stack.pop(), pos + 1))
    return spans


def _try_load(snippet: str) -> Any:
    try:
        return json.loads(snippet)
    except (ValueError, RecursionError):
        return None


def extract_json_object(text: str) -> dict:
    """Pull one JSON object out of arbitrary reply text.

    Tries, in order: the whole reply; the last fenced code block; balanced
    brace spans from longest to shortest. Raises ParseError when nothing
    yields a JSON object.
    """
    if not isinstance(text, str):
        raise ParseError("reply is not text", raw=repr(text)[:200])
    stripped = text.strip()
    obj = _try_load(stripped)
    if isinstance(obj, dict):
        return obj

    fences = _FENCE.findall(text)
    if fences:
        obj = _try_load(fences[-1].strip())
        if isinstance(obj, dict):
            return obj

    spans = sorted(_balanced_spans(text), key=lambda s: s[0] - s[1])
    for start, end in spans[:_MAX_SPAN_TRIES]:
        obj = _try_load(text[start:end])
        if isinstance(obj, dict):
            return obj
    raise ParseError("no JSON object found in reply", raw=text[:2000])


def _clean_token(value: Any) -> str:
    if not isinstance(value, str):
        raise ParseError(f"expected a string token, got {type(value).__name__}")
    return value.strip().lower().replace(" ", "_").replace("-", "_")


def normalize_judgment(value: Any) -> str:
    token = _clean_token(value)
    if token in JUDGMENT_TOKENS:
        return token
    if token + "_match" in JUDGMENT_TOKENS:
        return token + "_match"
    raise ParseError(f"unknown overall judgment {value!r}")


def normalize_verdict(value: Any) -> str:
    token = _clean_token(value)
    aliases = {
        "partial": "partially_met",
        "partially": "partially_met",
        "not_met": "unmet",
        "no": "unmet",
        "yes": "met",
    }
    token = aliases.get(token, token)
    if token not in VERDICT_TOKENS:
        raise ParseError(f"unknown component verdict {value!r}")
    return token


def parse_decomposition_reply(
    text: str, component_names: Sequence[str]
) -> list[tuple[str, str]]:
    """Parse a deconstruction reply into (name, description) pairs.

    Accepts ``{"components": {name: description, ...}}`` or a list of
    ``{"name": ..., "description": ...}`` objects. Every expected component
    must be present with a non-empty description; extras are ignored.
    """
    obj = extract_json_object(text)
    components = obj.get("components", obj)
    mapping: dict[str, str] = {}
    if isinstance(components, dict):
        for name, desc in components.items():
            if isinstance(name, str):
                mapping[_clean_token(name)] = desc
    elif isinstance(components, list):
        for entry in components:
            if isinstance(entry, dict) and isinstance(entry.get("name"), str):
                mapping[_clean_token(entry["name"])] = entry.get("description")
    else:
        raise ParseError("components is neither an object nor a list", raw=text[:2000])

    out = []
    for name in component_names:
        desc = mapping.get(name)
        if not isinstance(desc, str) or not desc.strip():
            raise ParseError(f"missing or empty component {name!r}", raw=text[:2000])
        out.append((name, desc.strip()))
    return out


def parse_evaluation_reply(
    text: str, component_names: Sequence[str]
) -> tuple[str, list[tuple[str, str, str]]]:
    """Parse an evaluation reply into (overall, [(name, verdict, rationale)]).

    Component notes are reordered to the expected component order; every
    expected component must appear exactly once. An ``excellent_match``
    overall with any unmet component is rejected as inconsistent.
    """
    obj = extract_json_object(text)
    if "overall" not in obj:
        raise ParseError("reply lacks an overall judgment", raw=text[:2000])
    overall = normalize_judgment(obj["overall"])

    entries = obj.get("components")
    mapping: dict[str, tuple[str, str]] = {}
    if isinstance(entries, dict):
        items: Iterable = entries.items()
        for name, val in items:
            if not isinstance(name, str):
                continue
            if isinstance(val, dict):
                verdict = normalize_verdict(val.get("verdict", ""))
                rationale = val.get("rationale", "")
            else:
                verdict = normalize_verdict(val)
                rationale = ""
            mapping[_clean_token(name)] = (verdict, str(rationale))
    elif isinstance(entries, list):
        for entry in entries:
            if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
                raise ParseError("malformed component entry", raw=text[:2000])
            name = _clean_token(entry["name"])
            if name in mapping:
                raise ParseError(f"component {name!r} appears twice", raw=text[:2000])
            mapping[name] = (
                normalize_verdict(entry.get("verdict", "")),
                str(entry.get("rationale", "")),
            )
    else:
        raise ParseError("reply lacks component notes", raw=text[:2000])

    notes = []
    for name in component_names:
        if name not in mapping:
            raise ParseError(f"missing component note for {name!r}", raw=text[:2000])
        verdict, rationale = mapping[name]
        notes.append((name, verdict, rationale))

    if overall == "excellent_match" and any(v == "unmet" for _, v, _ in notes):
        raise ParseError(
            "excellent_match is inconsistent with an unmet component", raw=text[:2000]
        )
    return overall, notes


def parse_ranking_reply(text: str) -> list[int]:
    """Parse a listwise ranking reply into 1-based candidate indices.

    Accepts ``{"ranking": [...]}`` or a bare JSON array. Integer-like
    entries are kept in order; anything else is dropped. Duplicate and
    out-of-range indices survive here (permutation repair removes them).
    """
    try:
        obj: Any = extract_json_object(text)
        ranking = obj.get("ranking")
    except ParseError:
        ranking = _try_load(text.strip())
        if not isinstance(ranking, list):
            raise
    if not isinstance(ranking, list):
        raise ParseError("reply lacks a ranking list", raw=text[:2000])
    indices = []
    for entry in ranking:
        if isinstance(entry, bool):
            continue
        if isinstance(entry, int):
            indices.append(entry)
        elif isinstance(entry, str) and entry.strip().lstrip("+-").isdigit():
            indices.append(int(entry.strip()))
        elif isinstance(entry, float) and entry.is_integer():
            indices.append(int(entry))
    if not indices:
        raise ParseError("ranking list holds no usable indices", raw=text[:2000])
    return indices
