"""Ranking quality metrics and the run report they aggregate into.

All metric operations are pure functions over ordered id lists. Aggregates
are arithmetic means of per-query values, and per-query values are persisted
so every aggregate can be recomputed bit-exactly from the run directory.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Iterable, Sequence

log = logging.getLogger(__name__)


class EmptyGroundTruth(ValueError):
    """Ground-truth id set is empty."""


class EmptySubset(ValueError):
    """Candidate subset is empty or shares nothing with the ground truth."""


def _check_unique(ranked: Sequence[str]) -> None:
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked ids must be unique")


def recall_at_k(ranked: Sequence[str], gts: Iterable[str], k: int) -> int:
    """1 if any ground-truth id appears within the first ``k`` positions."""
    gts = set(gts)
    if not gts:
        raise EmptyGroundTruth("ground truth is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_unique(ranked)
    return int(any(r in gts for r in ranked[:k]))


def map_at_k(ranked: Sequence[str], gts: Iterable[str], k: int) -> float:
    """Average precision truncated at ``k``, normalized by min(k, |gts|).

    AP@k = (1 / min(k, |gts|)) * sum_i P(i) * rel(i) with P(i) the precision
    over the first i positions. A perfectly front-loaded ranking scores 1.0
    even when k < |gts|.
    """
    gts = set(gts)
    if not gts:
        raise EmptyGroundTruth("ground truth is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_unique(ranked)
    hits = 0
    total = 0.0
    for i, rid in enumerate(ranked[:k], start=1):
        if rid in gts:
            hits += 1
            total += hits / i
    return total / min(k, len(gts))


def recall_subset_at_k(
    ranked: Sequence[str],
    subset: Iterable[str],
    gts: Iterable[str],
    k: int,
) -> int:
    """Recall after restricting the ranking to ``subset`` members.

    The ranking is filtered to subset ids preserving relative order; subset
    ids absent from the ranking are placed last in the original subset order
    (and flagged via a warning). Returns 1 if a ground-truth id sits within
    the first ``k`` filtered positions.
    """
    subset_list = list(subset)
    subset_set = set(subset_list)
    gts = set(gts)
    if not subset_set:
        raise EmptySubset("subset is empty")
    if not subset_set & gts:
        raise EmptySubset("subset contains no ground-truth id")
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_unique(ranked)
    filtered = [r for r in ranked if r in subset_set]
    missing = [s for s in subset_list if s not in set(filtered)]
    if missing:
        log.warning("subset ids not present in ranking, placed last: %s", missing)
        filtered.extend(missing)
    return int(any(r in gts for r in filtered[:k]))


def hits_at_k(
    per_round_ranks: Sequence[Sequence[int]],
    k: int,
    cumulative: bool = True,
) -> list[float]:
    """Per-round fraction of dialogues whose target ranks within top ``k``.

    ``per_round_ranks`` holds one list of 1-based ranks per dialogue, one
    entry per round. Dialogues shorter than the longest one carry their last
    rank forward (flagged). With ``cumulative`` a dialogue counts as a hit at
    round t if it hit at any round <= t.
    """
    if not per_round_ranks:
        raise ValueError("no dialogues given")
    if k < 1:
        raise ValueError("k must be >= 1")
    rounds = max(len(d) for d in per_round_ranks)
    padded = []
    for d in per_round_ranks:
        if not d:
            raise ValueError("a dialogue has no rounds")
        if any(r < 1 for r in d):
            raise ValueError("ranks are 1-based and must be >= 1")
        if len(d) < rounds:
            log.warning(
                "dialogue has %d rounds, carrying last rank forward to %d",
                len(d),
                rounds,
            )
            d = list(d) + [d[-1]] * (rounds - len(d))
        padded.append(list(d))

    fractions = []
    for t in range(rounds):
        if cumulative:
            hit = [any(r <= k for r in d[: t + 1]) for d in padded]
        else:
            hit = [d[t] <= k for d in padded]
        fractions.append(sum(hit) / len(padded))
    return fractions


@dataclass
class MetricReport:
    """Aggregated metrics plus the raw per-query values behind them."""

    config: dict
    aggregates: dict[str, float] = field(default_factory=dict)
    initial_aggregates: dict[str, float] = field(default_factory=dict)
    per_query: list[dict] = field(default_factory=list)
    degradation: dict[str, int] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "aggregates": self.aggregates,
            "initial_aggregates": self.initial_aggregates,
            "degradation": self.degradation,
            "failures": self.failures,
            "notes": self.notes,
            "per_query": self.per_query,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(
            config=d["config"],
            aggregates=d["aggregates"],
            initial_aggregates=d.get("initial_aggregates", {}),
            per_query=d["per_query"],
            degradation=d.get("degradation", {}),
            failures=d.get("failures", []),
            notes=d.get("notes", []),
        )


def aggregate_mean(values: Sequence[float]) -> float:
    """The one mean used for every aggregate, so recomputation is bit-exact."""
    return fmean(values)


def chart_csv(report: MetricReport) -> str:
    """Round/variant/k/value CSV for per-round line charts.

    Rows exist only for per-round aggregates (keys shaped
    ``<metric>@<k>@round<t>``); other profiles produce a header-only file.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "variant", "k", "value"])
    for key in sorted(report.aggregates):
        parts = key.split("@")
        if len(parts) == 3 and parts[2].startswith("round"):
            metric, k, round_part = parts
            writer.writerow([int(round_part[5:]), metric, int(k), report.aggregates[key]])
    return buf.getvalue()


def write_report(report: MetricReport, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    with open(out_dir / "per_query.jsonl", "w", encoding="utf-8") as fh:
        for row in report.per_query:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (out_dir / "chart.csv").write_text(chart_csv(report), encoding="utf-8")
    return out_dir / "report.json"
