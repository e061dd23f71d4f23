"""The three re-ranking stages: deconstruct, evaluate, rank listwise.

A query is deconstructed into five named semantic components, each candidate
image is evaluated against them into an ordinal judgment with per-component
verdicts, and a single listwise call orders all candidates by comparing those
textual evaluations. Ablation modes switch stages off: R+D drops evaluation,
R+E drops deconstruction, R drops both and ranks images directly.

Model replies are parsed as fenced JSON with one repair re-prompt; whatever
still fails degrades gracefully (evaluation becomes a flagged no_match,
ranking falls back to the initial order) so a batch run never dies on one
bad reply. The final order always passes through permutation repair, so the
output is a true permutation of the input candidates.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .backend import (
    Backend,
    BackendError,
    Message,
    TextPart,
    cache_key,
    encode_image_file,
)
from .parsing import (
    ParseError,
    parse_decomposition_reply,
    parse_evaluation_reply,
    parse_ranking_reply,
)
from .prompting import PromptLibrary
from .store import Candidate

MODES = ("R", "R+D", "R+E", "R+D+E")

COMPONENT_NAMES = (
    "primary_subject",
    "activity",
    "key_details",
    "environment",
    "ambiance",
)


class Judgment(enum.IntEnum):
    """Ordinal overall judgment of one candidate against the query."""

    NO_MATCH = 0
    WEAK_MATCH = 1
    PARTIAL_MATCH = 2
    GOOD_MATCH = 3
    EXCELLENT_MATCH = 4

    @property
    def token(self) -> str:
        return self.name.lower()

    @property
    def label(self) -> str:
        """Human wording, e.g. "partial match"."""
        return self.name.lower().replace("_", " ")

    @classmethod
    def from_token(cls, token: str) -> "Judgment":
        return cls[token.upper()]


VERDICTS = ("met", "partially_met", "unmet")


class StageParseError(Exception):
    """A stage reply stayed unparseable after the repair re-prompt."""

    def __init__(self, stage: str, raw: str):
        super().__init__(f"{stage} reply could not be parsed")
        self.stage = stage
        self.raw = raw


@dataclass(frozen=True)
class Component:
    name: str
    description: str


@dataclass(frozen=True)
class SemanticDecomposition:
    """The ordered component set a query is broken into (default five)."""

    components: tuple[Component, ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("decomposition needs at least one component")
        if any(not c.description.strip() for c in self.components):
            raise ValueError("component descriptions must be non-empty")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.components)

    @property
    def m(self) -> int:
        return len(self.components)

    def render(self) -> str:
        return "\n".join(
            f"{i}. {c.name}: {c.description}"
            for i, c in enumerate(self.components, start=1)
        )


@dataclass(frozen=True)
class ComponentNote:
    name: str
    verdict: str
    rationale: str

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}, got {self.verdict!r}")


@dataclass(frozen=True)
class CandidateEvaluation:
    """Structured verdict for one candidate image."""

    candidate_id: str
    overall: Judgment
    component_notes: tuple[ComponentNote, ...]
    degraded: bool = False

    def __post_init__(self):
        if self.overall is Judgment.EXCELLENT_MATCH and any(
            n.verdict == "unmet" for n in self.component_notes
        ):
            raise ValueError("excellent_match cannot carry an unmet component")

    def render(self) -> str:
        lines = [f"overall: {self.overall.token}"]
        for note in self.component_notes:
            line = f"- {note.name}: {note.verdict}"
            if note.rationale:
                line += f" ({note.rationale})"
            lines.append(line)
        return "\n".join(lines)


@dataclass(frozen=True)
class RankedItem:
    id: str
    source: str  # "model" when the model placed it, "repaired" when appended

    def __post_init__(self):
        if self.source not in ("model", "repaired"):
            raise ValueError(f"unknown provenance {self.source!r}")


@dataclass(frozen=True)
class RankedList:
    items: tuple[RankedItem, ...]

    @property
    def ids(self) -> list[str]:
        return [item.id for item in self.items]

    @property
    def repaired_count(self) -> int:
        return sum(1 for item in self.items if item.source == "repaired")


@dataclass(frozen=True)
class Query:
    """One retrieval query in one of three variants.

    text: plain text retrieval (TIR, or a flattened dialogue round).
    composed: reference image path plus manipulation text (CIR).
    dialogue: caption plus ordered question/answer pairs (Chat-IR source
    form; flattened to a text query by the harness before the pipeline).
    """

    variant: str
    text: str | None = None
    reference_image: str | None = None
    manipulation_text: str | None = None
    caption: str | None = None
    pairs: tuple[tuple[str, str], ...] | None = None

    def __post_init__(self):
        if self.variant == "text":
            ok = (
                bool(self.text)
                and self.reference_image is None
                and self.manipulation_text is None
                and self.caption is None
                and self.pairs is None
            )
        elif self.variant == "composed":
            ok = (
                bool(self.reference_image)
                and bool(self.manipulation_text)
                and self.text is None
                and self.caption is None
                and self.pairs is None
            )
        elif self.variant == "dialogue":
            ok = (
                bool(self.caption)
                and self.pairs is not None
                and self.text is None
                and self.reference_image is None
                and self.manipulation_text is None
            )
        else:
            raise ValueError(f"unknown query variant {self.variant!r}")
        if not ok:
            raise ValueError(f"fields do not match the {self.variant} variant")

    @classmethod
    def from_text(cls, text: str) -> "Query":
        return cls(variant="text", text=text)

    @classmethod
    def from_composed(cls, reference_image: str, manipulation_text: str) -> "Query":
        return cls(
            variant="composed",
            reference_image=reference_image,
            manipulation_text=manipulation_text,
        )

    @classmethod
    def from_dialogue(
        cls, caption: str, pairs: Sequence[tuple[str, str]]
    ) -> "Query":
        return cls(
            variant="dialogue",
            caption=caption,
            pairs=tuple((q, a) for q, a in pairs),
        )


def query_prompt_text(query: Query) -> str:
    """The raw text a prompt should carry for this query."""
    if query.variant == "text":
        return query.text
    if query.variant == "composed":
        return query.manipulation_text
    parts = [query.caption]
    parts.extend(f"Q: {q} A: {a}" for q, a in query.pairs)
    return ". ".join(parts)


@dataclass
class TranscriptEntry:
    """One backend call: which stage, which request, how parsing went."""

    stage: str
    request_digest: str
    parse_status: str  # ok | parse_error | backend_error
    attempt: int
    candidate_id: str | None = None

    def to_dict(self) -> dict:
        d = {
            "stage": self.stage,
            "request_digest": self.request_digest,
            "parse_status": self.parse_status,
            "attempt": self.attempt,
        }
        if self.candidate_id is not None:
            d["candidate_id"] = self.candidate_id
        return d


@dataclass
class RerankResult:
    ranked: RankedList
    evaluations: list[CandidateEvaluation]
    decomposition: SemanticDecomposition | None
    transcript: list[TranscriptEntry]
    stats: dict


def _chat_and_parse(
    backend: Backend,
    stage: str,
    messages: Sequence[Message],
    parse_fn: Callable[[str], object],
    transcript: list[TranscriptEntry],
    prompts: PromptLibrary,
    candidate_id: str | None = None,
):
    """One backend call, one repair re-prompt on parse failure.

    Returns the parsed value. Raises StageParseError when both attempts
    fail to parse; backend errors propagate after being logged to the
    transcript.
    """
    request = backend.request(messages)
    for attempt in (1, 2):
        digest = cache_key(request)
        try:
            response = backend.chat(request)
        except BackendError:
            transcript.append(
                TranscriptEntry(stage, digest, "backend_error", attempt, candidate_id)
            )
            raise
        try:
            parsed = parse_fn(response.text)
        except ParseError:
            transcript.append(
                TranscriptEntry(stage, digest, "parse_error", attempt, candidate_id)
            )
            if attempt == 2:
                raise StageParseError(stage, raw=response.text) from None
            repair = prompts.template("repair").rstrip()
            request = request.with_extra_user_text(
                f"{repair}\n\nYour previous reply:\n{response.text}"
            )
            continue
        transcript.append(
            TranscriptEntry(stage, digest, "ok", attempt, candidate_id)
        )
        return parsed


def deconstruct(
    query: Query,
    backend: Backend,
    *,
    prompts: PromptLibrary | None = None,
    transcript: list[TranscriptEntry] | None = None,
    component_names: Sequence[str] = COMPONENT_NAMES,
) -> SemanticDecomposition:
    """Split a text or composed query into named semantic components.

    One backend call (plus at most one repair re-prompt). The composed
    variant sends the reference image together with the manipulation text
    and asks for the decomposition of the intended target image.
    """
    prompts = prompts or PromptLibrary()
    transcript = transcript if transcript is not None else []
    if query.variant == "text":
        rendered = prompts.render("deconstruct_text", query_text=query.text)
        messages = [Message.user(TextPart(rendered))]
    elif query.variant == "composed":
        rendered = prompts.render(
            "deconstruct_composed", manipulation_text=query.manipulation_text
        )
        messages = [
            Message.user(encode_image_file(query.reference_image), TextPart(rendered))
        ]
    else:
        raise ValueError("dialogue queries must be flattened before deconstruction")

    pairs = _chat_and_parse(
        backend,
        "deconstruct",
        messages,
        lambda text: parse_decomposition_reply(text, component_names),
        transcript,
        prompts,
    )
    return SemanticDecomposition(
        components=tuple(Component(name, desc) for name, desc in pairs)
    )


def fallback_decomposition(
    query: Query, component_names: Sequence[str] = COMPONENT_NAMES
) -> SemanticDecomposition:
    """Decomposition used when the deconstruct stage cannot be parsed."""
    text = " ".join(query_prompt_text(query).split())[:200]
    return SemanticDecomposition(
        components=tuple(
            Component(name, f"as described by the query: {text}")
            for name in component_names
        )
    )


def _degraded_evaluation(
    candidate_id: str, component_names: Sequence[str]
) -> CandidateEvaluation:
    return CandidateEvaluation(
        candidate_id=candidate_id,
        overall=Judgment.NO_MATCH,
        component_notes=tuple(
            ComponentNote(name, "unmet", "evaluation reply could not be parsed")
            for name in component_names
        ),
        degraded=True,
    )


def _evaluate_with_header(
    header: str,
    candidate_id: str,
    candidate_image: str,
    backend: Backend,
    prompts: PromptLibrary,
    transcript: list[TranscriptEntry],
    component_names: Sequence[str],
) -> CandidateEvaluation:
    messages = [
        Message.user(
            encode_image_file(candidate_image),
            TextPart(f"Candidate id: {candidate_id}"),
            TextPart(header),
        )
    ]
    try:
        overall, notes = _chat_and_parse(
            backend,
            "evaluate",
            messages,
            lambda text: parse_evaluation_reply(text, component_names),
            transcript,
            prompts,
            candidate_id=candidate_id,
        )
    except StageParseError:
        return _degraded_evaluation(candidate_id, component_names)
    return CandidateEvaluation(
        candidate_id=candidate_id,
        overall=Judgment.from_token(overall),
        component_notes=tuple(ComponentNote(n, v, r) for n, v, r in notes),
    )


def evaluate_candidate(
    candidate_image: str,
    decomposition: SemanticDecomposition,
    backend: Backend,
    *,
    candidate_id: str | None = None,
    prompts: PromptLibrary | None = None,
    transcript: list[TranscriptEntry] | None = None,
) -> CandidateEvaluation:
    """Judge one candidate image against a decomposed query.

    One backend call carrying the image and the components. An unparseable
    reply (after the repair re-prompt) degrades to a flagged no_match record
    instead of failing the run; unreadable images and backend errors raise.
    """
    prompts = prompts or PromptLibrary()
    transcript = transcript if transcript is not None else []
    cid = candidate_id or str(candidate_image)
    header = prompts.render("evaluate", components=decomposition.render())
    return _evaluate_with_header(
        header, cid, candidate_image, backend, prompts, transcript,
        decomposition.names,
    )


def evaluate_candidate_raw(
    candidate_image: str,
    query_text: str,
    backend: Backend,
    *,
    candidate_id: str | None = None,
    prompts: PromptLibrary | None = None,
    transcript: list[TranscriptEntry] | None = None,
    component_names: Sequence[str] = COMPONENT_NAMES,
) -> CandidateEvaluation:
    """evaluate_candidate without a decomposition: the prompt carries the
    raw query text and the fixed aspect vocabulary instead of component
    descriptions (the R+E ablation)."""
    prompts = prompts or PromptLibrary()
    transcript = transcript if transcript is not None else []
    cid = candidate_id or str(candidate_image)
    header = prompts.render("evaluate_raw", query_text=query_text)
    return _evaluate_with_header(
        header, cid, candidate_image, backend, prompts, transcript, component_names
    )


def repair_permutation(
    model_order: Sequence[str], original_order: Sequence[str]
) -> RankedList:
    """Force a model-proposed ordering into a permutation of the input.

    Keeps the first occurrence of each proposed id that exists in the
    original list, drops duplicates and foreign ids, then appends whatever
    was omitted in original order. Appended ids are tagged ``repaired``.
    """
    if not original_order:
        raise ValueError("original order is empty")
    original_set = set(original_order)
    if len(original_set) != len(original_order):
        raise ValueError("original order has duplicate ids")
    items = []
    placed = set()
    for cid in model_order:
        if cid in original_set and cid not in placed:
            items.append(RankedItem(cid, "model"))
            placed.add(cid)
    for cid in original_order:
        if cid not in placed:
            items.append(RankedItem(cid, "repaired"))
    return RankedList(items=tuple(items))


def _indices_to_ids(indices: Sequence[int], ids: Sequence[str]) -> list[str]:
    return [ids[i - 1] for i in indices if 1 <= i <= len(ids)]


def _candidate_block(index: int, candidate_id: str) -> TextPart:
    return TextPart(f"[{index}] id {candidate_id}")


def rank_listwise(
    evaluations: Sequence[CandidateEvaluation],
    backend: Backend,
    *,
    prompts: PromptLibrary | None = None,
    transcript: list[TranscriptEntry] | None = None,
    stats: dict | None = None,
    attach_thumbnails: bool = False,
    resolve_image: Callable[[str], str] | None = None,
) -> RankedList:
    """Order all candidates with one comparative call over their evaluations.

    The prompt contains only the textual evaluations (no images) unless
    ``attach_thumbnails`` is set. The reply goes through permutation repair;
    if it stays unparseable, or the backend fails, the initial order is
    returned with every id tagged ``repaired``. A single candidate still
    issues the call so transcripts stay uniform across ablation modes.
    """
    if not evaluations:
        raise ValueError("rank_listwise needs at least one evaluation")
    ids = [ev.candidate_id for ev in evaluations]
    if len(set(ids)) != len(ids):
        raise ValueError("candidate ids must be unique")
    prompts = prompts or PromptLibrary()
    transcript = transcript if transcript is not None else []
    stats = stats if stats is not None else {}

    blocks = []
    for i, ev in enumerate(evaluations, start=1):
        blocks.append(f"[{i}] id {ev.candidate_id}\n{ev.render()}")
    rendered = prompts.render(
        "rank_evaluations", k=len(ids), evaluations="\n\n".join(blocks)
    )
    parts: list = [TextPart(rendered)]
    if attach_thumbnails:
        if resolve_image is None:
            raise ValueError("attach_thumbnails needs resolve_image")
        for i, cid in enumerate(ids, start=1):
            parts.append(_candidate_block(i, cid))
            parts.append(encode_image_file(resolve_image(cid)))
    return _rank_call(backend, [Message.user(*parts)], ids, prompts, transcript, stats)


def _rank_call(
    backend: Backend,
    messages: Sequence[Message],
    ids: Sequence[str],
    prompts: PromptLibrary,
    transcript: list[TranscriptEntry],
    stats: dict,
) -> RankedList:
    try:
        indices = _chat_and_parse(
            backend, "rank", messages, parse_ranking_reply, transcript, prompts
        )
    except (StageParseError, BackendError) as exc:
        stats["ranking_fallbacks"] = stats.get("ranking_fallbacks", 0) + 1
        stats.setdefault("ranking_fallback_errors", []).append(str(exc))
        return RankedList(items=tuple(RankedItem(cid, "repaired") for cid in ids))
    return repair_permutation(_indices_to_ids(indices, ids), ids)


def rank_over_images(
    ids: Sequence[str],
    backend: Backend,
    *,
    resolve_image: Callable[[str], str],
    query_text: str | None = None,
    decomposition: SemanticDecomposition | None = None,
    prompts: PromptLibrary | None = None,
    transcript: list[TranscriptEntry] | None = None,
    stats: dict | None = None,
) -> RankedList:
    """Single listwise call over candidate images (the R and R+D modes).

    Exactly one of ``query_text`` and ``decomposition`` selects the prompt:
    raw query text for mode R, rendered components for mode R+D. Same
    fallback behaviour as rank_listwise.
    """
    if (query_text is None) == (decomposition is None):
        raise ValueError("give exactly one of query_text or decomposition")
    if not ids:
        raise ValueError("rank_over_images needs at least one candidate")
    prompts = prompts or PromptLibrary()
    transcript = transcript if transcript is not None else []
    stats = stats if stats is not None else {}
    if decomposition is not None:
        rendered = prompts.render(
            "rank_decomposed", k=len(ids), components=decomposition.render()
        )
    else:
        rendered = prompts.render("rank_images", k=len(ids), query_text=query_text)
    parts: list = [TextPart(rendered)]
    for i, cid in enumerate(ids, start=1):
        parts.append(_candidate_block(i, cid))
        parts.append(encode_image_file(resolve_image(cid)))
    return _rank_call(backend, [Message.user(*parts)], ids, prompts, transcript, stats)


def rerank(
    query: Query,
    candidates: Sequence,
    backend: Backend,
    mode: str = "R+D+E",
    *,
    resolve_image: Callable[[str], str],
    prompts: PromptLibrary | None = None,
    attach_thumbnails: bool = False,
) -> RerankResult:
    """Run one query through the configured stages and return the new order.

    Modes: ``R+D+E`` deconstructs, evaluates every candidate, then ranks the
    evaluations; ``R+D`` ranks images directly against the decomposition;
    ``R+E`` evaluates against the raw query text, then ranks; ``R`` is a
    single listwise call over the raw query and the candidate images. The
    result is always a true permutation of the input candidates, and the
    transcript holds one entry per backend call for audit.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    ids = [c.id if isinstance(c, Candidate) else str(c) for c in candidates]
    if not ids:
        raise ValueError("rerank needs at least one candidate")
    if len(set(ids)) != len(ids):
        raise ValueError("candidate ids must be unique")
    prompts = prompts or PromptLibrary()

    transcript: list[TranscriptEntry] = []
    stats: dict = {}
    decomposition: SemanticDecomposition | None = None
    evaluations: list[CandidateEvaluation] = []

    if mode in ("R+D", "R+D+E"):
        try:
            decomposition = deconstruct(
                query, backend, prompts=prompts, transcript=transcript
            )
        except StageParseError:
            # The run must survive one bad reply: fall back to a decomposition
            # built from the query text, flagged in the stats.
            decomposition = fallback_decomposition(query)
            stats["deconstruct_fallbacks"] = 1

    if mode in ("R+E", "R+D+E"):
        per_candidate: list[list[TranscriptEntry]] = [[] for _ in ids]

        def _evaluate(i: int) -> CandidateEvaluation:
            cid = ids[i]
            image = resolve_image(cid)
            if mode == "R+D+E":
                return evaluate_candidate(
                    image,
                    decomposition,
                    backend,
                    candidate_id=cid,
                    prompts=prompts,
                    transcript=per_candidate[i],
                )
            return evaluate_candidate_raw(
                image,
                query_prompt_text(query),
                backend,
                candidate_id=cid,
                prompts=prompts,
                transcript=per_candidate[i],
            )

        # Results and transcript entries are gathered by initial candidate
        # index, so concurrent completion order cannot change the outcome.
        with ThreadPoolExecutor(max_workers=backend.parallelism) as pool:
            evaluations = list(pool.map(_evaluate, range(len(ids))))
        for entries in per_candidate:
            transcript.extend(entries)
        degraded = sum(1 for ev in evaluations if ev.degraded)
        if degraded:
            stats["degraded_evaluations"] = degraded
        ranked = rank_listwise(
            evaluations,
            backend,
            prompts=prompts,
            transcript=transcript,
            stats=stats,
            attach_thumbnails=attach_thumbnails,
            resolve_image=resolve_image if attach_thumbnails else None,
        )
    elif mode == "R+D":
        ranked = rank_over_images(
            ids,
            backend,
            resolve_image=resolve_image,
            decomposition=decomposition,
            prompts=prompts,
            transcript=transcript,
            stats=stats,
        )
    else:  # mode R
        ranked = rank_over_images(
            ids,
            backend,
            resolve_image=resolve_image,
            query_text=query_prompt_text(query),
            prompts=prompts,
            transcript=transcript,
            stats=stats,
        )

    stats["backend_calls"] = len(transcript)
    stats["repair_prompts"] = sum(1 for e in transcript if e.attempt == 2)
    return RerankResult(
        ranked=ranked,
        evaluations=evaluations,
        decomposition=decomposition,
        transcript=transcript,
        stats=stats,
    )
