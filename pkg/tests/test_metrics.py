import json
import math
import random
from statistics import fmean

import pytest

from cotrr.metrics import (
    EmptyGroundTruth,
    EmptySubset,
    MetricReport,
    aggregate_mean,
    chart_csv,
    hits_at_k,
    map_at_k,
    recall_at_k,
    recall_subset_at_k,
    write_report,
)


def oracle_recall(ranked, gts, k):
    return 1 if set(ranked[:k]) & set(gts) else 0


def oracle_map(ranked, gts, k):
    """Independent AP@k: literal precision-at-hit sum over explicit prefixes."""
    gts = set(gts)
    precisions = []
    for i in range(1, min(k, len(ranked)) + 1):
        if ranked[i - 1] in gts:
            prefix = ranked[:i]
            precisions.append(sum(1 for r in prefix if r in gts) / i)
    return sum(precisions) / min(k, len(gts))


def oracle_hits_noncumulative(per_round, k):
    rounds = max(len(d) for d in per_round)
    padded = [list(d) + [d[-1]] * (rounds - len(d)) for d in per_round]
    return [
        sum(1 for d in padded if d[t] <= k) / len(padded) for t in range(rounds)
    ]


def random_instance(rng):
    n = rng.randint(1, 60)
    ranked = [f"i{j}" for j in range(n)]
    rng.shuffle(ranked)
    gts = rng.sample(ranked, rng.randint(1, min(5, n)))
    if rng.random() < 0.3:
        gts.append("absent_gt")
    k = rng.randint(1, 70)
    return ranked, gts, k


class TestRecall:
    def test_hit_and_miss(self):
        assert recall_at_k(["a", "b", "c"], {"c"}, 3) == 1
        assert recall_at_k(["a", "b", "c"], {"c"}, 2) == 0
        assert recall_at_k(["a"], {"zzz"}, 5) == 0

    def test_empty_gts_rejected(self):
        with pytest.raises(EmptyGroundTruth):
            recall_at_k(["a"], set(), 1)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            recall_at_k(["a", "a"], {"a"}, 1)

    def test_oracle_equivalence(self):
        rng = random.Random(21)
        for _ in range(300):
            ranked, gts, k = random_instance(rng)
            assert recall_at_k(ranked, gts, k) == oracle_recall(ranked, gts, k)

    def test_monotone_in_k(self):
        rng = random.Random(22)
        for _ in range(50):
            ranked, gts, _ = random_instance(rng)
            values = [recall_at_k(ranked, gts, k) for k in range(1, len(ranked) + 1)]
            assert values == sorted(values)


class TestMapAtK:
    def test_hand_case(self):
        # gts {a, b}, ranked [x, a, y, b, z], k = 5:
        # hits at positions 2 and 4, AP = (1/2 + 2/4) / 2 = 0.5
        assert map_at_k(["x", "a", "y", "b", "z"], {"a", "b"}, 5) == pytest.approx(
            0.5, abs=1e-12
        )

    def test_front_loaded_is_perfect(self):
        assert map_at_k(["a", "b", "x", "y"], {"a", "b"}, 4) == 1.0
        # k < |gts|: normalizer is min(k, |gts|) so a full top-k of hits is 1.0
        assert map_at_k(["a", "b", "c"], {"a", "b", "c", "d"}, 2) == 1.0

    def test_no_hits_is_zero(self):
        assert map_at_k(["x", "y"], {"a"}, 2) == 0.0

    def test_oracle_equivalence(self):
        rng = random.Random(23)
        for _ in range(300):
            ranked, gts, k = random_instance(rng)
            assert map_at_k(ranked, gts, k) == pytest.approx(
                oracle_map(ranked, gts, k), abs=1e-12
            )

    def test_perfect_recall_implies_positive_map(self):
        rng = random.Random(24)
        for _ in range(100):
            ranked, gts, k = random_instance(rng)
            if recall_at_k(ranked, gts, k):
                assert map_at_k(ranked, gts, k) > 0.0


class TestRecallSubset:
    def test_filter_preserves_rank_order(self):
        ranked = ["c5", "c2", "c9", "c1"]
        subset = ["c9", "c2", "c1"]
        assert recall_subset_at_k(ranked, subset, {"c9"}, 1) == 0
        assert recall_subset_at_k(ranked, subset, {"c9"}, 2) == 1

    def test_missing_subset_ids_flagged_and_placed_last(self, caplog):
        ranked = ["a", "b"]
        subset = ["b", "ghost"]
        with caplog.at_level("WARNING"):
            assert recall_subset_at_k(ranked, subset, {"ghost"}, 1) == 0
            assert recall_subset_at_k(ranked, subset, {"ghost"}, 2) == 1
        assert any("ghost" in rec.getMessage() for rec in caplog.records)

    def test_empty_subset_rejected(self):
        with pytest.raises(EmptySubset):
            recall_subset_at_k(["a"], [], {"a"}, 1)

    def test_subset_without_gt_rejected(self):
        with pytest.raises(EmptySubset):
            recall_subset_at_k(["a", "b"], ["b"], {"a"}, 1)

    def test_oracle_equivalence(self):
        rng = random.Random(25)
        for _ in range(300):
            n = rng.randint(2, 40)
            ranked = [f"i{j}" for j in range(n)]
            rng.shuffle(ranked)
            subset = rng.sample(ranked, rng.randint(1, n))
            gts = {rng.choice(subset)}
            k = rng.randint(1, len(subset))
            filtered = [r for r in ranked if r in set(subset)]
            expected = 1 if set(filtered[:k]) & gts else 0
            assert recall_subset_at_k(ranked, subset, gts, k) == expected


class TestHitsAtK:
    def test_single_dialogue_cumulative(self):
        # Ranks 15, 9, 3 with k = 10: miss, then a hit that persists.
        assert hits_at_k([[15, 9, 3]], 10) == [0.0, 1.0, 1.0]

    def test_cumulative_keeps_early_hit(self):
        # Ranks 8, 12, 30 with k = 10: hit at round 0 persists cumulatively.
        assert hits_at_k([[8, 12, 30]], 10) == [1.0, 1.0, 1.0]
        assert hits_at_k([[8, 12, 30]], 10, cumulative=False) == [1.0, 0.0, 0.0]

    def test_fractions_over_dialogues(self):
        dialogues = [[1, 1], [20, 2], [30, 30]]
        assert hits_at_k(dialogues, 5) == [pytest.approx(1 / 3), pytest.approx(2 / 3)]

    def test_short_dialogue_padded_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            out = hits_at_k([[2, 2, 2], [50]], 10)
        assert out == [0.5, 0.5, 0.5]
        assert any("carrying last rank" in rec.message for rec in caplog.records)

    def test_cumulative_never_decreases(self):
        rng = random.Random(26)
        for _ in range(100):
            dialogues = [
                [rng.randint(1, 100) for _ in range(rng.randint(1, 11))]
                for _ in range(rng.randint(1, 8))
            ]
            out = hits_at_k(dialogues, rng.randint(1, 50))
            assert all(b >= a for a, b in zip(out, out[1:]))

    def test_noncumulative_oracle(self):
        rng = random.Random(27)
        for _ in range(200):
            dialogues = [
                [rng.randint(1, 100) for _ in range(rng.randint(1, 11))]
                for _ in range(rng.randint(1, 8))
            ]
            k = rng.randint(1, 50)
            got = hits_at_k(dialogues, k, cumulative=False)
            assert got == pytest.approx(oracle_hits_noncumulative(dialogues, k))

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            hits_at_k([], 5)
        with pytest.raises(ValueError):
            hits_at_k([[]], 5)
        with pytest.raises(ValueError):
            hits_at_k([[0, 3]], 5)


class TestAggregation:
    def test_mean_matches_fmean(self):
        values = [0.25, 0.5, 1.0, 0.0]
        assert aggregate_mean(values) == fmean(values)

    def test_permuting_query_order_changes_no_aggregate(self):
        rng = random.Random(28)
        values = [rng.random() for _ in range(137)]
        shuffled = list(values)
        rng.shuffle(shuffled)
        assert aggregate_mean(values) == aggregate_mean(shuffled)

    def test_aggregate_recomputable_from_per_query_values(self):
        rng = random.Random(29)
        per_query = []
        for i in range(50):
            ranked = [f"i{j}" for j in range(20)]
            rng.shuffle(ranked)
            per_query.append(
                {"query_id": f"q{i}", "metrics": {"mAP@5": map_at_k(ranked, {ranked[3]}, 5)}}
            )
        agg = aggregate_mean([row["metrics"]["mAP@5"] for row in per_query])
        assert agg == fmean(row["metrics"]["mAP@5"] for row in per_query)


class TestReport:
    def _sample_report(self):
        return MetricReport(
            config={"mode": "R+D+E", "k_rerank": 15},
            aggregates={"R@1": 1.0, "mAP@5": 0.75, "Hits@10@round0": 0.5},
            initial_aggregates={"R@1": 0.25},
            per_query=[
                {"query_id": "q0", "metrics": {"R@1": 1, "mAP@5": 0.5}},
                {"query_id": "q1", "metrics": {"R@1": 1, "mAP@5": 1.0}},
            ],
            degradation={"repair_prompts": 1, "degraded_evaluations": 0},
            notes=["sample"],
        )

    def test_json_round_trip(self):
        report = self._sample_report()
        back = MetricReport.from_json(report.to_json())
        assert back.config == report.config
        assert back.aggregates == report.aggregates
        assert back.initial_aggregates == report.initial_aggregates
        assert back.degradation == report.degradation
        assert back.per_query == report.per_query

    def test_json_is_stable(self):
        report = self._sample_report()
        assert report.to_json() == report.to_json()

    def test_chart_csv_series(self):
        report = self._sample_report()
        csv_text = chart_csv(report)
        lines = csv_text.strip().splitlines()
        assert lines[0] == "round,variant,k,value"
        # only per-round aggregates become chart rows
        assert lines[1:] == ["0,Hits,10,0.5"]

    def test_write_report_files(self, tmp_path):
        report = self._sample_report()
        out = write_report(report, tmp_path)
        assert out == tmp_path / "report.json"
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["aggregates"]["mAP@5"] == 0.75
        per_query_lines = (tmp_path / "per_query.jsonl").read_text().splitlines()
        assert len(per_query_lines) == 2
        assert json.loads(per_query_lines[0])["query_id"] == "q0"
        assert (tmp_path / "chart.csv").read_text().startswith("round,variant,k,value")


def test_metric_values_are_finite_floats():
    rng = random.Random(30)
    for _ in range(100):
        ranked, gts, k = random_instance(rng)
        value = map_at_k(ranked, gts, k)
        assert isinstance(value, float) and math.isfinite(value)
        assert 0.0 <= value <= 1.0
