"""Task manifests, profiles, and end-to-end run orchestration.

A manifest is JSON lines, one record per query, validated against its task
tag (tir, cir, chat). A profile fixes the re-rank depth K, the optional
subset depth, and the metric set. ``run`` walks the manifest with a worker
pool: initial ranking (embedding store top-N or precomputed candidates),
re-rank of the top K through the pipeline, splice, metrics, and persisted
report/transcript files. Chat records are evaluated once per dialogue round.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backend import Backend
from .metrics import (
    MetricReport,
    aggregate_mean,
    hits_at_k,
    map_at_k,
    recall_at_k,
    recall_subset_at_k,
    write_report,
)
from .pipeline import (
    PromptLibrary,
    Query,
    RankedList,
    RerankResult,
    evaluate_candidate,
    evaluate_candidate_raw,
    fallback_decomposition,
    query_prompt_text,
    rank_listwise,
    rank_over_images,
    rerank,
)
from .store import EmbeddingStore, top_k

log = logging.getLogger(__name__)

TASKS = ("tir", "cir", "chat")

# Metrics needing depth beyond the re-ranked prefix read the initial ranking
# down to at least this many positions.
MIN_RANKING_DEPTH = 50


@dataclass(frozen=True)
class TaskProfile:
    """Per-task run parameters: re-rank depth, subset depth, metric set."""

    name: str
    task: str
    k_rerank: int
    metrics: tuple[tuple[str, int], ...]
    k_subset: int | None = None
    backbone: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.k_rerank < 1:
            raise ValueError("k_rerank must be >= 1")
        if self.k_subset is not None and self.k_subset < 1:
            raise ValueError("k_subset must be >= 1")


PROFILES: dict[str, TaskProfile] = {
    "flickr30k": TaskProfile(
        "flickr30k", "tir", 20, (("R", 1), ("R", 5), ("R", 10))
    ),
    "mscoco": TaskProfile("mscoco", "tir", 20, (("R", 1), ("R", 5), ("R", 10))),
    "cirr": TaskProfile(
        "cirr",
        "cir",
        15,
        (("R", 1), ("R", 5), ("R", 10), ("R_Subs", 1), ("R_Subs", 2), ("R_Subs", 3)),
        k_subset=3,
    ),
    "circo": TaskProfile(
        "circo", "cir", 70, (("mAP", 5), ("mAP", 10), ("mAP", 25), ("mAP", 50))
    ),
    "visdial": TaskProfile("visdial", "chat", 20, (("Hits", 10),)),
    # Bundled synthetic fixture: 15 planted candidates per query.
    "fixture": TaskProfile("fixture", "tir", 15, (("R", 1), ("R", 5), ("mAP", 5))),
}


class ManifestError(ValueError):
    """A manifest line failed validation; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RunAborted(RuntimeError):
    """Too many records failed; the run was stopped."""

    def __init__(self, message: str, failures: list[dict]):
        super().__init__(message)
        self.failures = failures


@dataclass(frozen=True)
class ManifestRecord:
    """One query as stored in a manifest, validated for its task."""

    query_id: str
    task: str
    ground_truth: tuple[str, ...]
    text: str | None = None
    reference_image: str | None = None
    manipulation_text: str | None = None
    caption: str | None = None
    dialogue: tuple[tuple[str, str], ...] | None = None
    round_queries: tuple[str, ...] | None = None
    subset: tuple[str, ...] | None = None
    candidates: tuple | None = None


def _require_str(obj: dict, key: str, line: int) -> str:
    val = obj.get(key)
    if not isinstance(val, str) or not val.strip():
        raise ManifestError(line, f"missing or empty field {key!r}")
    return val


def _id_list(obj: dict, key: str, line: int, required: bool) -> tuple[str, ...] | None:
    val = obj.get(key)
    if val is None:
        if required:
            raise ManifestError(line, f"missing field {key!r}")
        return None
    if (
        not isinstance(val, list)
        or not val
        or any(not isinstance(v, str) or not v for v in val)
    ):
        raise ManifestError(line, f"field {key!r} must be a non-empty list of ids")
    return tuple(val)


def _parse_record(obj: dict, line: int) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError(line, "record is not a JSON object")
    query_id = _require_str(obj, "query_id", line)
    task = obj.get("task")
    if task not in TASKS:
        raise ManifestError(line, f"unknown task tag {task!r}")
    ground_truth = _id_list(obj, "ground_truth", line, required=True)

    text = reference_image = manipulation_text = caption = None
    dialogue = round_queries = None
    if task == "tir":
        text = _require_str(obj, "text", line)
    elif task == "cir":
        reference_image = _require_str(obj, "reference_image", line)
        manipulation_text = _require_str(obj, "manipulation_text", line)
    else:
        caption = _require_str(obj, "caption", line)
        raw_dialogue = obj.get("dialogue")
        if not isinstance(raw_dialogue, list):
            raise ManifestError(line, "chat record needs a dialogue list")
        pairs = []
        for i, pair in enumerate(raw_dialogue):
            if (
                not isinstance(pair, (list, tuple))
                or len(pair) != 2
                or not all(isinstance(p, str) and p for p in pair)
            ):
                raise ManifestError(line, f"dialogue entry {i} is not a [q, a] pair")
            pairs.append((pair[0], pair[1]))
        dialogue = tuple(pairs)
        raw_rq = obj.get("round_queries")
        if raw_rq is not None:
            if (
                not isinstance(raw_rq, list)
                or len(raw_rq) != len(dialogue) + 1
                or any(not isinstance(q, str) or not q for q in raw_rq)
            ):
                raise ManifestError(
                    line,
                    "round_queries must hold one non-empty query per round "
                    f"(expected {len(dialogue) + 1})",
                )
            round_queries = tuple(raw_rq)

    subset = _id_list(obj, "subset", line, required=False)
    if subset is not None:
        if task != "cir":
            raise ManifestError(line, "subset is only valid for cir records")
        if not set(subset) & set(ground_truth):
            raise ManifestError(line, "subset contains no ground-truth id")

    candidates = obj.get("candidates")
    if candidates is not None:
        if not isinstance(candidates, list) or not candidates:
            raise ManifestError(line, "candidates must be a non-empty list")
        if all(isinstance(c, str) for c in candidates):
            if len(set(candidates)) != len(candidates):
                raise ManifestError(line, "candidates hold duplicate ids")
            candidates = tuple(candidates)
        elif task == "chat" and all(isinstance(c, list) for c in candidates):
            if len(candidates) != len(dialogue) + 1:
                raise ManifestError(
                    line,
                    "per-round candidates must hold one list per round "
                    f"(expected {len(dialogue) + 1})",
                )
            rounds = []
            for rl in candidates:
                if not rl or any(not isinstance(v, str) or not v for v in rl):
                    raise ManifestError(line, "a per-round candidate list is invalid")
                if len(set(rl)) != len(rl):
                    raise ManifestError(line, "candidates hold duplicate ids")
                rounds.append(tuple(rl))
            candidates = tuple(rounds)
        else:
            raise ManifestError(line, "candidates must be ids or per-round id lists")

    return ManifestRecord(
        query_id=query_id,
        task=task,
        ground_truth=ground_truth,
        text=text,
        reference_image=reference_image,
        manipulation_text=manipulation_text,
        caption=caption,
        dialogue=dialogue,
        round_queries=round_queries,
        subset=subset,
        candidates=candidates,
    )


def load_manifest(
    path: str | Path, store: EmbeddingStore | None = None
) -> list[ManifestRecord]:
    """Load and validate a JSON-lines manifest.

    Every error names its 1-based line number. When ``store`` is given,
    ground-truth and subset ids must exist in it (catching id-space
    mismatches early instead of silently scoring zero).
    """
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise ManifestError(line_no, f"malformed JSON: {exc}") from None
            record = _parse_record(obj, line_no)
            if record.query_id in seen:
                raise ManifestError(line_no, f"duplicate query_id {record.query_id!r}")
            seen.add(record.query_id)
            if store is not None:
                for gid in record.ground_truth:
                    if gid not in store:
                        raise ManifestError(
                            line_no, f"ground-truth id {gid!r} not in store"
                        )
                for sid in record.subset or ():
                    if sid not in store:
                        raise ManifestError(line_no, f"subset id {sid!r} not in store")
            records.append(record)
    if not records:
        raise ManifestError(0, "manifest holds no records")
    return records


def chat_query_for_round(record: ManifestRecord, t: int) -> Query:
    """Text query for dialogue round ``t`` (0 = caption only).

    ``t`` counts the question/answer pairs included, so a 10-round dialog
    yields 11 query points. Records carrying precomputed reformulated
    queries return them verbatim; otherwise the caption and the first ``t``
    pairs are concatenated as "Q: ... A: ..." segments joined by ". ".
    """
    if record.task != "chat":
        raise ValueError("chat_query_for_round needs a chat record")
    if t < 0 or t > len(record.dialogue):
        raise ValueError(
            f"round {t} out of range for a {len(record.dialogue)}-round dialogue"
        )
    if record.round_queries is not None:
        return Query.from_text(record.round_queries[t])
    parts = [record.caption]
    parts.extend(f"Q: {q} A: {a}" for q, a in record.dialogue[:t])
    return Query.from_text(". ".join(parts))


def splice_ranking(
    full_initial: Sequence[str], reranked_prefix: RankedList | Sequence[str]
) -> list[str]:
    """Replace the head of ``full_initial`` with the re-ranked prefix.

    The prefix must be a permutation of the first K initial ids; everything
    beyond K keeps its initial order, so re-ranking never touches the tail.
    """
    prefix_ids = (
        reranked_prefix.ids
        if isinstance(reranked_prefix, RankedList)
        else list(reranked_prefix)
    )
    k = len(prefix_ids)
    if k > len(full_initial):
        raise ValueError("prefix is longer than the full ranking")
    if sorted(prefix_ids) != sorted(full_initial[:k]):
        raise ValueError("prefix is not a permutation of the initial top-K")
    return list(prefix_ids) + list(full_initial[k:])


def make_image_resolver(image_root: str | Path):
    """Map candidate ids to image files under ``image_root``.

    Tries the id verbatim, then with common extensions appended.
    """
    root = Path(image_root)

    def resolve(cid: str) -> str:
        base = root / cid
        if base.exists():
            return str(base)
        for ext in (".jpg", ".jpeg", ".png"):
            path = root / f"{cid}{ext}"
            if path.exists():
                return str(path)
        raise FileNotFoundError(f"no image for candidate {cid!r} under {root}")

    return resolve


def _query_for_record(record: ManifestRecord, image_root: Path | None) -> Query:
    if record.task == "tir":
        return Query.from_text(record.text)
    if record.task == "cir":
        ref = record.reference_image
        if image_root is not None and not Path(ref).is_absolute():
            try:
                ref = make_image_resolver(image_root)(ref)
            except FileNotFoundError:
                pass  # keep the raw value; the failure surfaces on read
        return Query.from_composed(ref, record.manipulation_text)
    raise ValueError("chat records are flattened per round, not converted directly")


def _initial_ranking(
    record: ManifestRecord,
    round_index: int | None,
    depth: int,
    image_store: EmbeddingStore | None,
    query_store: EmbeddingStore | None,
) -> list[str]:
    """Initial full ranking: precomputed candidates, or store top-N."""
    if record.candidates is not None:
        cands = record.candidates
        if round_index is not None and cands and isinstance(cands[0], tuple):
            cands = cands[round_index]
        return list(cands)
    if image_store is None or query_store is None:
        raise ValueError(
            f"record {record.query_id!r} has no precomputed candidates and no "
            "embedding stores were supplied"
        )
    qid = record.query_id
    if round_index is not None:
        qid = f"{qid}::round{round_index}"
    vec = query_store.vector_for(qid)
    return [c.id for c in top_k(image_store, vec, depth)]


def _rank_of(ranking: Sequence[str], gts: set, absent_rank: int) -> int:
    for pos, cid in enumerate(ranking, start=1):
        if cid in gts:
            return pos
    return absent_rank


def _score(ranking: Sequence[str], record: ManifestRecord, profile: TaskProfile) -> dict:
    values = {}
    for name, k in profile.metrics:
        if name == "R":
            values[f"R@{k}"] = float(
                recall_at_k(ranking, record.ground_truth, k)
            )
        elif name == "mAP":
            values[f"mAP@{k}"] = map_at_k(ranking, record.ground_truth, k)
    return values


def _subset_order(record: ManifestRecord, final_ranking: Sequence[str]) -> list[str]:
    """Subset members ordered by the full ranking; absent members last."""
    position = {cid: i for i, cid in enumerate(final_ranking)}
    present = [cid for cid in record.subset if cid in position]
    present.sort(key=lambda cid: position[cid])
    missing = [cid for cid in record.subset if cid not in position]
    if missing:
        log.warning(
            "query %s: subset ids missing from ranking, placed last: %s",
            record.query_id,
            missing,
        )
    return present + missing


def _rerank_subset(
    query: Query,
    subset_order: list[str],
    k_subset: int,
    mode: str,
    backend: Backend,
    prompts: PromptLibrary,
    resolve_image,
    main: RerankResult,
) -> tuple[list[str], list, dict]:
    """Re-rank the top k_subset of the subset ordering.

    Existing evaluations from the full pass are reused; only subset members
    the full pass never evaluated get a fresh evaluation call.
    """
    prefix = subset_order[:k_subset]
    transcript: list = []
    stats: dict = {}
    if len(prefix) < 2:
        return list(subset_order), transcript, stats

    if mode in ("R+E", "R+D+E"):
        by_id = {ev.candidate_id: ev for ev in main.evaluations}
        evaluations = []
        for cid in prefix:
            ev = by_id.get(cid)
            if ev is None:
                if mode == "R+D+E":
                    decomposition = main.decomposition or fallback_decomposition(query)
                    ev = evaluate_candidate(
                        resolve_image(cid),
                        decomposition,
                        backend,
                        candidate_id=cid,
                        prompts=prompts,
                        transcript=transcript,
                    )
                else:
                    ev = evaluate_candidate_raw(
                        resolve_image(cid),
                        query_prompt_text(query),
                        backend,
                        candidate_id=cid,
                        prompts=prompts,
                        transcript=transcript,
                    )
                if ev.degraded:
                    stats["degraded_evaluations"] = (
                        stats.get("degraded_evaluations", 0) + 1
                    )
            evaluations.append(ev)
        ranked = rank_listwise(
            evaluations, backend, prompts=prompts, transcript=transcript, stats=stats
        )
    elif mode == "R+D":
        decomposition = main.decomposition or fallback_decomposition(query)
        ranked = rank_over_images(
            prefix,
            backend,
            resolve_image=resolve_image,
            decomposition=decomposition,
            prompts=prompts,
            transcript=transcript,
            stats=stats,
        )
    else:
        ranked = rank_over_images(
            prefix,
            backend,
            resolve_image=resolve_image,
            query_text=query_prompt_text(query),
            prompts=prompts,
            transcript=transcript,
            stats=stats,
        )
    if ranked.repaired_count:
        stats["repaired_ids"] = ranked.repaired_count
    return ranked.ids + subset_order[k_subset:], transcript, stats


_STAT_KEYS = (
    "backend_calls",
    "repair_prompts",
    "degraded_evaluations",
    "ranking_fallbacks",
    "deconstruct_fallbacks",
    "repaired_ids",
)

# The subset of per-record stats reported as run-level degradation counters.
DEGRADATION_KEYS = (
    "repair_prompts",
    "degraded_evaluations",
    "ranking_fallbacks",
    "deconstruct_fallbacks",
    "repaired_ids",
)


def _merge_stats(total: dict, part: dict, keys: tuple = _STAT_KEYS) -> None:
    for key in keys:
        if part.get(key):
            total[key] = total.get(key, 0) + part[key]


def _process_standard(
    record: ManifestRecord,
    profile: TaskProfile,
    backend: Backend,
    mode: str,
    prompts: PromptLibrary,
    resolve_image,
    image_root: Path | None,
    image_store: EmbeddingStore | None,
    query_store: EmbeddingStore | None,
    depth: int,
    attach_thumbnails: bool,
) -> dict:
    """One tir/cir record: retrieve, re-rank, splice, score."""
    initial = _initial_ranking(record, None, depth, image_store, query_store)
    if len(initial) < profile.k_rerank:
        raise ValueError(
            f"initial ranking holds {len(initial)} ids, "
            f"need k_rerank={profile.k_rerank}"
        )
    query = _query_for_record(record, image_root)
    result = rerank(
        query,
        initial[: profile.k_rerank],
        backend,
        mode,
        resolve_image=resolve_image,
        prompts=prompts,
        attach_thumbnails=attach_thumbnails,
    )
    final = splice_ranking(initial, result.ranked)

    stats: dict = {}
    _merge_stats(stats, result.stats)
    if result.ranked.repaired_count:
        stats["repaired_ids"] = result.ranked.repaired_count
    transcript = [e.to_dict() for e in result.transcript]

    metric_values = _score(final, record, profile)
    initial_values = _score(initial, record, profile)

    if record.subset is not None and any(n == "R_Subs" for n, _ in profile.metrics):
        subset_initial = _subset_order(record, initial)
        subset_order = _subset_order(record, final)
        k_subset = profile.k_subset or len(subset_order)
        subset_final, sub_transcript, sub_stats = _rerank_subset(
            query,
            subset_order,
            k_subset,
            mode,
            backend,
            prompts,
            resolve_image,
            result,
        )
        _merge_stats(stats, sub_stats)
        stats["backend_calls"] = stats.get("backend_calls", 0) + len(sub_transcript)
        transcript.extend(e.to_dict() for e in sub_transcript)
        for name, k in profile.metrics:
            if name == "R_Subs":
                metric_values[f"R_Subs@{k}"] = float(
                    recall_subset_at_k(subset_final, record.subset, record.ground_truth, k)
                )
                initial_values[f"R_Subs@{k}"] = float(
                    recall_subset_at_k(
                        subset_initial, record.subset, record.ground_truth, k
                    )
                )

    absent = len(final) + 1
    gts = set(record.ground_truth)
    row = {
        "query_id": record.query_id,
        "metrics": metric_values,
        "initial_metrics": initial_values,
        "gt_rank": _rank_of(final, gts, absent),
        "initial_gt_rank": _rank_of(initial, gts, absent),
        "stats": stats,
    }
    return {"row": row, "transcript": transcript, "stats": stats}


def _process_chat(
    record: ManifestRecord,
    profile: TaskProfile,
    backend: Backend,
    mode: str,
    prompts: PromptLibrary,
    resolve_image,
    image_store: EmbeddingStore | None,
    query_store: EmbeddingStore | None,
    depth: int,
    attach_thumbnails: bool,
) -> dict:
    """One chat record: re-rank and score every dialogue round."""
    rows = []
    transcript = []
    stats: dict = {}
    gts = set(record.ground_truth)
    ranks: list[int] = []
    initial_ranks: list[int] = []
    for t in range(len(record.dialogue) + 1):
        initial = _initial_ranking(record, t, depth, image_store, query_store)
        if len(initial) < profile.k_rerank:
            raise ValueError(
                f"round {t}: initial ranking holds {len(initial)} ids, "
                f"need k_rerank={profile.k_rerank}"
            )
        query = chat_query_for_round(record, t)
        result = rerank(
            query,
            initial[: profile.k_rerank],
            backend,
            mode,
            resolve_image=resolve_image,
            prompts=prompts,
            attach_thumbnails=attach_thumbnails,
        )
        final = splice_ranking(initial, result.ranked)
        _merge_stats(stats, result.stats)
        if result.ranked.repaired_count:
            stats["repaired_ids"] = (
                stats.get("repaired_ids", 0) + result.ranked.repaired_count
            )
        for entry in result.transcript:
            d = entry.to_dict()
            d["round"] = t
            transcript.append(d)
        absent = len(final) + 1
        rank = _rank_of(final, gts, absent)
        initial_rank = _rank_of(initial, gts, absent)
        ranks.append(rank)
        initial_ranks.append(initial_rank)
        rows.append(
            {
                "query_id": record.query_id,
                "round": t,
                "gt_rank": rank,
                "initial_gt_rank": initial_rank,
                "stats": {"repaired_ids": result.ranked.repaired_count},
            }
        )
    return {
        "rows": rows,
        "transcript": transcript,
        "stats": stats,
        "ranks": ranks,
        "initial_ranks": initial_ranks,
    }


def run(
    manifest_path: str | Path,
    profile: TaskProfile,
    backend: Backend,
    out_dir: str | Path,
    *,
    mode: str = "R+D+E",
    image_store: EmbeddingStore | None = None,
    query_store: EmbeddingStore | None = None,
    image_root: str | Path | None = None,
    prompts: PromptLibrary | None = None,
    parallelism: int = 4,
    failure_threshold: float = 0.10,
    attach_thumbnails: bool = False,
    config_echo: dict | None = None,
) -> MetricReport:
    """Execute a full run and persist report, per-query rows, transcript.

    Records are processed by a bounded worker pool but assembled in manifest
    order, so outputs are deterministic for deterministic backends. A record
    that raises is logged as a failure and skipped; the run aborts only when
    more than ``failure_threshold`` of records fail.
    """
    prompts = prompts or PromptLibrary()
    records = load_manifest(manifest_path, store=image_store)
    image_root = Path(image_root) if image_root is not None else None
    if image_root is None:
        raise ValueError("image_root is required: every mode reads candidate images")
    resolve_image = make_image_resolver(image_root)
    depth = max(profile.k_rerank, MIN_RANKING_DEPTH)

    def _process(record: ManifestRecord):
        try:
            if record.task == "chat":
                out = _process_chat(
                    record, profile, backend, mode, prompts, resolve_image,
                    image_store, query_store, depth, attach_thumbnails,
                )
            else:
                out = _process_standard(
                    record, profile, backend, mode, prompts, resolve_image,
                    image_root, image_store, query_store, depth, attach_thumbnails,
                )
            return ("ok", out)
        except Exception as exc:  # noqa: BLE001 - per-record isolation
            log.exception("record %s failed", record.query_id)
            return ("fail", f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        outcomes = list(pool.map(_process, records))

    failures = []
    per_query = []
    transcript_rows = []
    degradation: dict[str, int] = {}
    chat_ranks: list[list[int]] = []
    chat_initial_ranks: list[list[int]] = []
    for record, (status, payload) in zip(records, outcomes):
        if status == "fail":
            failures.append({"query_id": record.query_id, "error": payload})
            continue
        _merge_stats(degradation, payload["stats"], keys=DEGRADATION_KEYS)
        if record.task == "chat":
            per_query.extend(payload["rows"])
            chat_ranks.append(payload["ranks"])
            chat_initial_ranks.append(payload["initial_ranks"])
        else:
            per_query.append(payload["row"])
        for row in payload["transcript"]:
            transcript_rows.append({"query_id": record.query_id, **row})

    if len(failures) > failure_threshold * len(records):
        raise RunAborted(
            f"{len(failures)} of {len(records)} records failed "
            f"(threshold {failure_threshold:.0%})",
            failures,
        )

    aggregates: dict[str, float] = {}
    initial_aggregates: dict[str, float] = {}
    notes: list[str] = []
    if profile.task == "chat":
        for name, k in profile.metrics:
            if name != "Hits":
                continue
            if chat_ranks:
                for t, frac in enumerate(hits_at_k(chat_ranks, k, cumulative=True)):
                    aggregates[f"Hits@{k}@round{t}"] = frac
                for t, frac in enumerate(hits_at_k(chat_ranks, k, cumulative=False)):
                    aggregates[f"Hits_nc@{k}@round{t}"] = frac
                for t, frac in enumerate(
                    hits_at_k(chat_initial_ranks, k, cumulative=True)
                ):
                    initial_aggregates[f"Hits@{k}@round{t}"] = frac
        notes.append("Hits@k keys are cumulative over rounds; Hits_nc@k keys are not")
    else:
        keys = sorted({key for row in per_query for key in row["metrics"]})
        for key in keys:
            values = [row["metrics"][key] for row in per_query if key in row["metrics"]]
            if values:
                aggregates[key] = aggregate_mean(values)
            initial_values = [
                row["initial_metrics"][key]
                for row in per_query
                if key in row["initial_metrics"]
            ]
            if initial_values:
                initial_aggregates[key] = aggregate_mean(initial_values)
    if profile.task == "cir" and profile.k_subset is not None:
        notes.append(
            "subset re-ranking reuses existing evaluations; only subset members "
            "outside the re-ranked prefix are evaluated fresh"
        )

    report = MetricReport(
        config=dict(config_echo or {}),
        aggregates=aggregates,
        initial_aggregates=initial_aggregates,
        per_query=per_query,
        degradation=degradation,
        failures=failures,
        notes=notes,
    )
    out_dir = Path(out_dir)
    write_report(report, out_dir)
    with open(out_dir / "transcript.jsonl", "w", encoding="utf-8") as fh:
        for row in transcript_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return report
