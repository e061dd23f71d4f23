"""Deterministic stand-ins for the chat endpoint.

Every mock derives its behaviour from ``(seed, request digest)`` alone, so a
run produces identical transcripts regardless of worker count or completion
order. The oracle family reads a ``labels`` map (candidate id -> relevance
level) and answers each pipeline stage the way an ideal model would; the
degraded variants corrupt specific stages to exercise the repair paths.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading
from typing import Mapping, Sequence

from .backend import (
    ChatRequest,
    PermanentBackendError,
    TextPart,
    TransientBackendError,
    cache_key,
)

COMPONENT_NAMES = (
    "primary_subject",
    "activity",
    "key_details",
    "environment",
    "ambiance",
)

_JUDGMENT_BY_FRACTION = (
    (1.0, "excellent_match"),
    (0.8, "good_match"),
    (0.5, "partial_match"),
    (0.0, "weak_match"),
)

_CANDIDATE_LINE = re.compile(r"^Candidate id: (\S+)", re.MULTILINE)
_LISTED_LINE = re.compile(r"^\[(\d+)\] id (\S+)", re.MULTILINE)


def _request_text(request: ChatRequest) -> str:
    chunks = []
    for msg in request.messages:
        for part in msg.parts:
            if isinstance(part, TextPart):
                chunks.append(part.text)
    return "\n".join(chunks)


def _rng_for(seed: int, request: ChatRequest) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{cache_key(request)}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def detect_stage(request: ChatRequest) -> tuple[str, dict]:
    """Classify a prompt as deconstruct / evaluate / rank from its markers."""
    text = _request_text(request)
    listed = _LISTED_LINE.findall(text)
    if listed:
        return "rank", {"ids": [cid for _, cid in listed]}
    cand = _CANDIDATE_LINE.search(text)
    if cand:
        return "evaluate", {"candidate_id": cand.group(1)}
    return "deconstruct", {}


def judgment_for_fraction(fraction: float) -> str:
    for floor, token in _JUDGMENT_BY_FRACTION:
        if fraction >= floor and (floor > 0.0 or fraction > 0.0):
            return token
    return "no_match"


class OracleTransport:
    """Answers every stage perfectly according to the labels map."""

    def __init__(self, labels: Mapping[str, int] | None = None, seed: int = 0):
        self.labels = dict(labels or {})
        self.seed = seed

    def _label(self, candidate_id: str) -> int:
        return int(self.labels.get(candidate_id, 0))

    def _deconstruct_reply(self, request: ChatRequest) -> str:
        text = _request_text(request)
        gist = " ".join(text.split())[:60] or "the requested scene"
        components = [
            {"name": name, "description": f"{name.replace('_', ' ')} of {gist}"}
            for name in COMPONENT_NAMES
        ]
        return json.dumps({"components": components})

    def _evaluate_reply(self, candidate_id: str) -> str:
        met = max(0, min(5, self._label(candidate_id)))
        overall = judgment_for_fraction(met / 5.0)
        components = []
        for i, name in enumerate(COMPONENT_NAMES):
            verdict = "met" if i < met else "unmet"
            components.append(
                {
                    "name": name,
                    "verdict": verdict,
                    "rationale": f"{name.replace('_', ' ')} is {verdict} in this image",
                }
            )
        return json.dumps({"overall": overall, "components": components})

    def _ranking(self, ids: Sequence[str]) -> list[int]:
        order = sorted(
            range(len(ids)), key=lambda i: (-self._label(ids[i]), i)
        )
        return [i + 1 for i in order]

    def _rank_reply(self, request: ChatRequest, ids: Sequence[str]) -> str:
        return json.dumps({"ranking": self._ranking(ids)})

    def send(self, request: ChatRequest) -> str:
        stage, info = detect_stage(request)
        if stage == "rank":
            return self._rank_reply(request, info["ids"])
        if stage == "evaluate":
            return self._evaluate_reply(info["candidate_id"])
        return self._deconstruct_reply(request)


class NoisyTransport(OracleTransport):
    """Oracle everywhere except ranking, which gets adjacent swaps applied."""

    def __init__(
        self,
        labels: Mapping[str, int] | None = None,
        seed: int = 0,
        swaps: int | None = None,
    ):
        super().__init__(labels, seed)
        self.swaps = swaps

    def _rank_reply(self, request: ChatRequest, ids: Sequence[str]) -> str:
        ranking = self._ranking(ids)
        rng = _rng_for(self.seed, request)
        n = len(ranking)
        swaps = self.swaps if self.swaps is not None else rng.randint(1, max(1, n // 3))
        for _ in range(swaps):
            if n < 2:
                break
            i = rng.randrange(n - 1)
            ranking[i], ranking[i + 1] = ranking[i + 1], ranking[i]
        return json.dumps({"ranking": ranking})


class TruncatingTransport(OracleTransport):
    """Oracle everywhere except ranking, which loses a suffix."""

    def __init__(
        self,
        labels: Mapping[str, int] | None = None,
        seed: int = 0,
        suffix: int | None = None,
    ):
        super().__init__(labels, seed)
        self.suffix = suffix

    def _rank_reply(self, request: ChatRequest, ids: Sequence[str]) -> str:
        ranking = self._ranking(ids)
        n = len(ranking)
        if self.suffix is not None:
            drop = min(self.suffix, n - 1)
        elif n <= 1:
            drop = 0
        else:
            drop = _rng_for(self.seed, request).randint(1, n - 1)
        kept = ranking[: n - drop]
        return json.dumps({"ranking": kept})


class DuplicatingTransport(OracleTransport):
    """Oracle everywhere except ranking, which gains dupes and stray indices."""

    def _rank_reply(self, request: ChatRequest, ids: Sequence[str]) -> str:
        ranking = self._ranking(ids)
        rng = _rng_for(self.seed, request)
        n = len(ranking)
        if n >= 2:
            drop_at = rng.randrange(n)
            dup_at = rng.randrange(n - 1)
            del ranking[drop_at]
            ranking.insert(dup_at, ranking[dup_at])
        ranking.insert(rng.randrange(len(ranking) + 1), n + 1 + rng.randrange(3))
        return json.dumps({"ranking": ranking})


_GARBAGE = (
    "I looked at the images and the second one seems best overall.",
    '```json\n{"ranking": [1, 2,\n```',
    '{"rank_order": "first"}',
    "```\nnot json at all\n```",
    '{"components": }',
    "",
)


class MalformedTransport:
    """Returns unparseable text at every stage, including repair re-prompts."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def send(self, request: ChatRequest) -> str:
        rng = _rng_for(self.seed, request)
        text = _GARBAGE[rng.randrange(len(_GARBAGE))]
        # An empty completion would surface as a backend error rather than a
        # parse failure, so substitute prose in that slot.
        return text or "No structured answer is available for this query."


class ScriptedTransport:
    """Plays back a fixed sequence of replies and failures, in call order."""

    def __init__(self, script: Sequence):
        self.script = list(script)
        self._next = 0
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            if self._next >= len(self.script):
                raise RuntimeError(
                    f"scripted transport exhausted after {len(self.script)} replies"
                )
            entry = self.script[self._next]
            self._next += 1
        if isinstance(entry, str):
            return entry
        if "transient" in entry:
            raise TransientBackendError(str(entry["transient"]))
        if "permanent" in entry:
            raise PermanentBackendError(str(entry["permanent"]))
        return entry["text"]


_KINDS = {
    "oracle": OracleTransport,
    "noisy": NoisyTransport,
    "truncating": TruncatingTransport,
    "duplicating": DuplicatingTransport,
}


def make_transport(
    spec: str,
    labels: Mapping[str, int] | None = None,
    script: Sequence | None = None,
):
    """Build a mock from a ``mock:<kind>[:<seed>]`` spec string."""
    parts = spec.split(":")
    if parts[0] != "mock" or len(parts) > 3:
        raise ValueError(f"not a mock transport spec: {spec!r}")
    kind = parts[1] if len(parts) > 1 and parts[1] else "oracle"
    seed = int(parts[2]) if len(parts) > 2 and parts[2] else 0
    if kind == "scripted":
        if script is None:
            raise ValueError("scripted transport needs a script")
        return ScriptedTransport(script)
    if kind == "malformed":
        return MalformedTransport(seed)
    if kind in _KINDS:
        return _KINDS[kind](labels, seed)
    raise ValueError(f"unknown mock kind {kind!r}")
