import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner
from PIL import Image

from cotrr.cli import main
from cotrr.store import write_store


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(autouse=True)
def _no_ambient_credentials(monkeypatch):
    for var in ("COTRR_API_KEY", "COTRR_BASE_URL", "COTRR_CACHE_DIR"):
        monkeypatch.delenv(var, raising=False)


def _write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return str(path)


def _make_images(root, ids):
    root.mkdir(parents=True, exist_ok=True)
    for cid in ids:
        shade = (hash(cid) % 200 + 30, 60, 150)
        Image.new("RGB", (10, 10), shade).save(root / f"{cid}.jpg", format="JPEG")


def _run_fixture(tmp_path, n_queries=4, n_cands=6):
    """Manifest + images + labels.json; ground truth planted at position 2."""
    images = tmp_path / "images"
    records, labels, ids = [], {}, []
    for qi in range(n_queries):
        cands = [f"q{qi}_c{j}" for j in range(n_cands)]
        ids.extend(cands)
        gt = cands[2]
        labels[gt] = 5
        records.append(
            {
                "query_id": f"q{qi}",
                "task": "tir",
                "text": f"scene number {qi}",
                "ground_truth": [gt],
                "candidates": cands,
            }
        )
    _make_images(images, ids)
    manifest = _write_manifest(tmp_path / "manifest.jsonl", records)
    (tmp_path / "labels.json").write_text(json.dumps(labels), encoding="utf-8")
    return manifest, images


def _base_run_args(manifest, images, out_dir, **overrides):
    args = {
        "--manifest": manifest,
        "--profile": "fixture",
        "--mode": "R+D+E",
        "--backend": "mock:oracle:7",
        "--k-rerank": "4",
        "--image-root": str(images),
        "--out": str(out_dir),
        "--parallelism": "4",
    }
    args.update(overrides)
    flat = []
    for key, value in args.items():
        if value is not None:
            flat.extend([key, value])
    return flat


class TestHelp:
    def test_main_lists_subcommands(self, runner):
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for name in ("retrieve", "run", "report", "validate-manifest"):
            assert name in result.output

    def test_every_flag_appears_in_help(self, runner):
        import click

        for name, cmd in main.commands.items():
            result = runner.invoke(main, [name, "--help"])
            assert result.exit_code == 0
            for param in cmd.params:
                if isinstance(param, click.Option):
                    assert any(opt in result.output for opt in param.opts), (
                        name,
                        param.name,
                    )


class TestValidateManifest:
    def test_valid_manifest(self, runner, tmp_path):
        manifest, _ = _run_fixture(tmp_path, n_queries=2)
        result = runner.invoke(main, ["validate-manifest", "--manifest", manifest])
        assert result.exit_code == 0
        assert "2 records" in result.output

    def test_invalid_manifest_exits_3(self, runner, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"query_id": "q", "task": "tir"}\n', encoding="utf-8")
        result = runner.invoke(main, ["validate-manifest", "--manifest", str(path)])
        assert result.exit_code == 3
        assert "line 1" in result.stderr

    def test_missing_file_exits_2(self, runner, tmp_path):
        result = runner.invoke(
            main, ["validate-manifest", "--manifest", str(tmp_path / "nope.jsonl")]
        )
        assert result.exit_code == 2

    def test_store_cross_check(self, runner, tmp_path):
        write_store(tmp_path / "v.bin", ["a"], np.eye(1, dtype="f4"))
        manifest = _write_manifest(
            tmp_path / "m.jsonl",
            [
                {
                    "query_id": "q",
                    "task": "tir",
                    "text": "x",
                    "ground_truth": ["ghost"],
                    "candidates": ["a"],
                }
            ],
        )
        result = runner.invoke(
            main,
            [
                "validate-manifest",
                "--manifest",
                manifest,
                "--store",
                str(tmp_path / "v.bin"),
            ],
        )
        assert result.exit_code == 3
        assert "ghost" in result.stderr


class TestRetrieve:
    def _setup(self, tmp_path):
        write_store(tmp_path / "images.bin", ["e0", "e1", "e2"], np.eye(3, dtype="f4"))
        records = [
            {
                "query_id": "q0",
                "task": "tir",
                "text": "x",
                "ground_truth": ["e1"],
            },
            {
                "query_id": "q1",
                "task": "tir",
                "text": "y",
                "ground_truth": ["e2"],
            },
        ]
        manifest = _write_manifest(tmp_path / "m.jsonl", records)
        qvecs = np.array([[0, 1, 0], [0, 0, 1]], dtype="f4")
        write_store(tmp_path / "queries.bin", ["q0", "q1"], qvecs)
        return manifest

    def test_identity_basis_ranks_own_image_first(self, runner, tmp_path):
        manifest = self._setup(tmp_path)
        out = tmp_path / "cands.jsonl"
        args = [
            "retrieve",
            "--manifest",
            manifest,
            "--image-store",
            str(tmp_path / "images.bin"),
            "--query-store",
            str(tmp_path / "queries.bin"),
            "--out",
            str(out),
        ]
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert lines[0]["query_id"] == "q0"
        assert lines[0]["candidates"][0] == "e1"
        assert lines[0]["scores"][0] == pytest.approx(1.0, abs=1e-6)
        assert lines[1]["candidates"][0] == "e2"

        first = out.read_bytes()
        assert runner.invoke(main, args).exit_code == 0
        assert out.read_bytes() == first

    def test_chat_records_get_per_round_lines(self, runner, tmp_path):
        write_store(tmp_path / "images.bin", ["e0", "e1"], np.eye(2, dtype="f4"))
        manifest = _write_manifest(
            tmp_path / "m.jsonl",
            [
                {
                    "query_id": "d0",
                    "task": "chat",
                    "caption": "cap",
                    "dialogue": [["q?", "a"]],
                    "ground_truth": ["e0"],
                }
            ],
        )
        qids = ["d0::round0", "d0::round1"]
        write_store(
            tmp_path / "queries.bin", qids, np.eye(2, dtype="f4")
        )
        out = tmp_path / "cands.jsonl"
        result = runner.invoke(
            main,
            [
                "retrieve",
                "--manifest",
                manifest,
                "--image-store",
                str(tmp_path / "images.bin"),
                "--query-store",
                str(tmp_path / "queries.bin"),
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert [l["round"] for l in lines] == [0, 1]

    def test_missing_query_embedding_exits_3(self, runner, tmp_path):
        manifest = self._setup(tmp_path)
        write_store(tmp_path / "queries.bin", ["only_q9"], np.eye(1, 3, dtype="f4"))
        result = runner.invoke(
            main,
            [
                "retrieve",
                "--manifest",
                manifest,
                "--image-store",
                str(tmp_path / "images.bin"),
                "--query-store",
                str(tmp_path / "queries.bin"),
                "--out",
                str(tmp_path / "o.jsonl"),
            ],
        )
        assert result.exit_code == 3
        assert "q0" in result.stderr


class TestRun:
    def test_oracle_run_reports_perfect_recall(self, runner, tmp_path):
        manifest, images = _run_fixture(tmp_path)
        out = tmp_path / "out"
        result = runner.invoke(main, ["run"] + _base_run_args(manifest, images, out))
        assert result.exit_code == 0, result.output
        assert "R@1 = 1.0000" in result.output
        report = json.loads((out / "report.json").read_text())
        assert report["aggregates"]["R@1"] == 1.0
        assert report["config"]["mode"] == "R+D+E"
        assert report["config"]["k_rerank"] == 4
        # bundled labels.json beside the manifest was picked up automatically
        assert report["config"]["mock_labels"].endswith("labels.json")

    def test_missing_required_options_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, ["run"])
        assert result.exit_code == 2
        assert "--manifest" in result.stderr

        manifest, images = _run_fixture(tmp_path, n_queries=1)
        result = runner.invoke(main, ["run", "--manifest", manifest])
        assert result.exit_code == 2
        assert "--profile" in result.stderr

    def test_unknown_profile_and_mode_exit_2(self, runner, tmp_path):
        manifest, images = _run_fixture(tmp_path, n_queries=1)
        args = _base_run_args(manifest, images, tmp_path / "o")
        result = runner.invoke(
            main, ["run"] + args + ["--profile", "imagenet"]
        )
        assert result.exit_code == 2 and "unknown profile" in result.stderr
        result = runner.invoke(main, ["run"] + args + ["--mode", "R+Z"])
        assert result.exit_code == 2 and "mode" in result.stderr

    def test_live_backend_without_key_exits_2(self, runner, tmp_path):
        manifest, images = _run_fixture(tmp_path, n_queries=1)
        args = _base_run_args(
            manifest, images, tmp_path / "o", **{"--backend": "https://api.example/v1"}
        )
        result = runner.invoke(main, ["run"] + args)
        assert result.exit_code == 2
        assert "COTRR_API_KEY" in result.stderr

    def test_manifest_store_mismatch_exits_3(self, runner, tmp_path):
        manifest, images = _run_fixture(tmp_path, n_queries=1)
        write_store(tmp_path / "imgs.bin", ["unrelated"], np.eye(1, dtype="f4"))
        args = _base_run_args(manifest, images, tmp_path / "o")
        result = runner.invoke(
            main, ["run"] + args + ["--image-store", str(tmp_path / "imgs.bin")]
        )
        assert result.exit_code == 3

    def test_aborted_run_exits_4(self, runner, tmp_path):
        manifest, images = _run_fixture(tmp_path, n_queries=4)
        for path in images.glob("q0_c*.jpg"):
            path.unlink()
        for path in images.glob("q1_c*.jpg"):
            path.unlink()
        result = runner.invoke(
            main, ["run"] + _base_run_args(manifest, images, tmp_path / "o")
        )
        assert result.exit_code == 4
        assert "failed" in result.stderr

    def test_config_file_with_flag_override(self, runner, tmp_path):
        manifest, images = _run_fixture(tmp_path, n_queries=2)
        config = {
            "manifest": manifest,
            "profile": "fixture",
            "mode": "R",
            "backend": "mock:oracle:7",
            "k_rerank": 4,
            "image_root": str(images),
            "out": str(tmp_path / "out"),
        }
        config_path = tmp_path / "run.yaml"
        config_path.write_text(yaml.safe_dump(config), encoding="utf-8")
        result = runner.invoke(
            main, ["run", "--config", str(config_path), "--mode", "R+D"]
        )
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["config"]["mode"] == "R+D"  # flag beats file
        assert report["config"]["k_rerank"] == 4  # file beats default

    def test_unknown_config_keys_exit_2(self, runner, tmp_path):
        manifest, images = _run_fixture(tmp_path, n_queries=1)
        config_path = tmp_path / "run.yaml"
        config_path.write_text(
            yaml.safe_dump({"manifest": manifest, "krerank": 4}), encoding="utf-8"
        )
        result = runner.invoke(main, ["run", "--config", str(config_path)])
        assert result.exit_code == 2
        assert "krerank" in result.stderr

    def test_env_provides_backend_and_cache(self, runner, tmp_path, monkeypatch):
        manifest, images = _run_fixture(tmp_path, n_queries=2)
        cache_dir = tmp_path / "cache"
        monkeypatch.setenv("COTRR_BASE_URL", "mock:oracle:7")
        monkeypatch.setenv("COTRR_CACHE_DIR", str(cache_dir))
        args = _base_run_args(manifest, images, tmp_path / "out")
        # drop the --backend pair so the env value is used
        idx = args.index("--backend")
        del args[idx : idx + 2]
        result = runner.invoke(main, ["run"] + args)
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["config"]["backend"] == "mock:oracle:7"
        assert len(list(cache_dir.glob("*.json"))) > 0

    def test_config_echo_relaunches_identical_run(self, runner, tmp_path):
        manifest, images = _run_fixture(tmp_path)
        out1, out2 = tmp_path / "out1", tmp_path / "out2"
        result = runner.invoke(main, ["run"] + _base_run_args(manifest, images, out1))
        assert result.exit_code == 0, result.output

        echoed = json.loads((out1 / "report.json").read_text())["config"]
        flag_names = {
            "manifest": "--manifest",
            "profile": "--profile",
            "mode": "--mode",
            "backend": "--backend",
            "model": "--model",
            "temperature": "--temperature",
            "k_rerank": "--k-rerank",
            "k_subset": "--k-subset",
            "parallelism": "--parallelism",
            "failure_threshold": "--failure-threshold",
            "prompts_dir": "--prompts-dir",
            "image_store": "--image-store",
            "query_store": "--query-store",
            "image_root": "--image-root",
            "mock_labels": "--mock-labels",
            "mock_script": "--mock-script",
        }
        args = ["run", "--out", str(out2)]
        for key, flag in flag_names.items():
            value = echoed.get(key)
            if value is not None:
                args.extend([flag, str(value)])
        if echoed.get("attach_thumbnails"):
            args.append("--attach-thumbnails")
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
        for name in ("report.json", "per_query.jsonl", "transcript.jsonl", "chart.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


class TestReport:
    def _fabricate(self, out_dir, aggregates, mode="R+D+E"):
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "config": {"mode": mode},
            "aggregates": aggregates,
            "initial_aggregates": {},
            "degradation": {},
            "failures": [],
            "notes": [],
            "per_query": [],
        }
        (out_dir / "report.json").write_text(json.dumps(payload), encoding="utf-8")

    def test_table_across_runs(self, runner, tmp_path):
        self._fabricate(tmp_path / "base", {"R@1": 0.25, "R@5": 0.5}, mode="R")
        self._fabricate(tmp_path / "full", {"R@1": 0.75, "R@5": 0.9})
        result = runner.invoke(
            main, ["report", str(tmp_path / "base"), str(tmp_path / "full")]
        )
        assert result.exit_code == 0
        assert "base (R)" in result.output
        assert "full (R+D+E)" in result.output
        line = next(l for l in result.output.splitlines() if l.startswith("R@1"))
        assert "0.2500" in line and "0.7500" in line

    def test_mismatched_metric_sets_warn(self, runner, tmp_path):
        self._fabricate(tmp_path / "a", {"R@1": 0.5})
        self._fabricate(tmp_path / "b", {"mAP@5": 0.4})
        result = runner.invoke(main, ["report", str(tmp_path / "a"), str(tmp_path / "b")])
        assert result.exit_code == 0
        assert "different metric sets" in result.stderr
        assert "-" in result.output

    def test_missing_report_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, ["report", str(tmp_path / "void")])
        assert result.exit_code == 2

    def test_merged_csv(self, runner, tmp_path):
        self._fabricate(
            tmp_path / "chat",
            {"Hits@10@round0": 0.5, "Hits@10@round1": 0.75, "R@1": 0.2},
        )
        csv_path = tmp_path / "merged.csv"
        result = runner.invoke(
            main, ["report", str(tmp_path / "chat"), "--out-csv", str(csv_path)]
        )
        assert result.exit_code == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "run,round,variant,k,value"
        assert "chat,0,Hits,10,0.5" in lines
        assert "chat,1,Hits,10,0.75" in lines
        assert len(lines) == 3  # R@1 has no round, so no csv row
