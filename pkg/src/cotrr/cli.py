"""Command-line front end: retrieve, run, report, validate-manifest.

Configuration precedence is flag > config file > environment > default.
Every flag has a config-file equivalent (same name, underscores); the
effective configuration is echoed verbatim into the run report so a run can
be reproduced from its report alone.

Exit codes: 0 success, 2 configuration error, 3 validation error,
4 run aborted by the failure threshold.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from pathlib import Path

import click
import yaml

from .backend import Backend, HttpTransport, ResponseCache, RetryPolicy
from .harness import (
    PROFILES,
    ManifestError,
    RunAborted,
    load_manifest,
    run as run_harness,
)
from .metrics import MetricReport
from .mocks import make_transport
from .pipeline import MODES
from .prompting import PromptLibrary
from .store import StoreFormatError, load_store, top_k

DEFAULT_MODEL = "gemini-2.5-pro"
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_ABORTED = 4


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        _fail(EXIT_CONFIG, f"config file not found: {path}")
    except yaml.YAMLError as exc:
        _fail(EXIT_CONFIG, f"config file is not valid YAML: {exc}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        _fail(EXIT_CONFIG, "config file must hold a mapping of option names")
    return data


def _pick(flag, config: dict, key: str, env: str | None = None, default=None):
    """flag > config file > environment > default."""
    if flag is not None:
        return flag
    if key in config and config[key] is not None:
        return config[key]
    if env and os.environ.get(env):
        return os.environ[env]
    return default


def _load_store_or_fail(path: str | None, what: str):
    if path is None:
        return None
    try:
        return load_store(path)
    except FileNotFoundError:
        _fail(EXIT_CONFIG, f"{what} not found: {path}")
    except StoreFormatError as exc:
        _fail(EXIT_VALIDATION, f"{what}: {exc}")


def _build_backend(
    spec: str,
    model: str,
    temperature: float,
    cache_dir: str | None,
    parallelism: int,
    mock_labels: str | None,
    mock_script: str | None,
):
    if spec.startswith("mock:"):
        labels = None
        if mock_labels:
            try:
                labels = json.loads(Path(mock_labels).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                _fail(EXIT_CONFIG, f"cannot read mock labels {mock_labels}: {exc}")
        script = None
        if mock_script:
            try:
                script = json.loads(Path(mock_script).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                _fail(EXIT_CONFIG, f"cannot read mock script {mock_script}: {exc}")
        try:
            transport = make_transport(spec, labels=labels, script=script)
        except ValueError as exc:
            _fail(EXIT_CONFIG, str(exc))
    else:
        api_key = os.environ.get("COTRR_API_KEY")
        if not api_key:
            _fail(
                EXIT_CONFIG,
                "COTRR_API_KEY is not set; a live backend needs a credential "
                "(or use --backend mock:oracle)",
            )
        transport = HttpTransport(spec, api_key)
    cache = ResponseCache(cache_dir) if cache_dir else None
    return Backend(
        transport,
        model=model,
        temperature=temperature,
        cache=cache,
        retry=RetryPolicy(),
        parallelism=parallelism,
    )


@click.group()
def main():
    """Training-free listwise re-ranking for image retrieval."""


@main.command("validate-manifest")
@click.option("--manifest", required=True, help="JSON-lines manifest to validate.")
@click.option("--store", default=None, help="Embedding store to cross-check ids against.")
def cmd_validate_manifest(manifest, store):
    """Validate a manifest (and optionally its ids against a store)."""
    loaded_store = _load_store_or_fail(store, "store")
    try:
        records = load_manifest(manifest, store=loaded_store)
    except FileNotFoundError:
        _fail(EXIT_CONFIG, f"manifest not found: {manifest}")
    except ManifestError as exc:
        _fail(EXIT_VALIDATION, f"{manifest}: {exc}")
    by_task: dict[str, int] = {}
    for rec in records:
        by_task[rec.task] = by_task.get(rec.task, 0) + 1
    summary = ", ".join(f"{count} {task}" for task, count in sorted(by_task.items()))
    click.echo(f"OK: {len(records)} records ({summary})")


@main.command("retrieve")
@click.option("--manifest", required=True, help="JSON-lines manifest.")
@click.option("--image-store", required=True, help="Candidate embedding store.")
@click.option("--query-store", required=True, help="Query embedding store.")
@click.option("--out", required=True, help="Output candidates file (JSON lines).")
@click.option("--depth", default=50, show_default=True, help="Ranking depth per query.")
def cmd_retrieve(manifest, image_store, query_store, out, depth):
    """Write initial top-K rankings for every query (and chat round)."""
    images = _load_store_or_fail(image_store, "image store")
    queries = _load_store_or_fail(query_store, "query store")
    try:
        records = load_manifest(manifest, store=images)
    except FileNotFoundError:
        _fail(EXIT_CONFIG, f"manifest not found: {manifest}")
    except ManifestError as exc:
        _fail(EXIT_VALIDATION, f"{manifest}: {exc}")

    def _lookup(qid: str):
        try:
            return queries.vector_for(qid)
        except KeyError:
            _fail(EXIT_VALIDATION, f"query embedding {qid!r} missing from query store")

    lines = []
    for rec in records:
        if rec.task == "chat":
            for t in range(len(rec.dialogue) + 1):
                hits = top_k(images, _lookup(f"{rec.query_id}::round{t}"), depth)
                lines.append(
                    {
                        "query_id": rec.query_id,
                        "round": t,
                        "candidates": [c.id for c in hits],
                        "scores": [c.score for c in hits],
                    }
                )
        else:
            hits = top_k(images, _lookup(rec.query_id), depth)
            lines.append(
                {
                    "query_id": rec.query_id,
                    "candidates": [c.id for c in hits],
                    "scores": [c.score for c in hits],
                }
            )
    with open(out, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    click.echo(f"wrote {len(lines)} rankings to {out}")


# Option names a YAML config file may set (the file mirrors the flag names,
# minus the leading dashes, with underscores).
_CONFIG_KEYS = frozenset(
    {
        "manifest",
        "profile",
        "mode",
        "backend",
        "model",
        "temperature",
        "k_rerank",
        "k_subset",
        "image_store",
        "query_store",
        "image_root",
        "out",
        "cache_dir",
        "parallelism",
        "failure_threshold",
        "attach_thumbnails",
        "prompts_dir",
        "mock_labels",
        "mock_script",
    }
)


@main.command("run")
@click.option("--config", "config_path", default=None, help="YAML config file; flags override it.")
@click.option("--manifest", default=None, help="JSON-lines manifest.")
@click.option("--profile", "profile_name", default=None, help=f"Task profile: {', '.join(PROFILES)}.")
@click.option("--mode", default=None, help=f"Pipeline mode: {', '.join(MODES)}.")
@click.option("--backend", "backend_spec", default=None, help="Endpoint base URL, or mock:<kind>[:<seed>].")
@click.option("--model", default=None, help=f"Model id sent to the endpoint (default {DEFAULT_MODEL}).")
@click.option("--temperature", default=None, type=float, help="Sampling temperature (default 0.0).")
@click.option("--k-rerank", default=None, type=int, help="Override the profile re-rank depth.")
@click.option("--k-subset", default=None, type=int, help="Override the profile subset depth.")
@click.option("--image-store", default=None, help="Candidate embedding store (with .ids sidecar).")
@click.option("--query-store", default=None, help="Query embedding store (with .ids sidecar).")
@click.option("--image-root", default=None, help="Directory holding candidate images.")
@click.option("--out", "out_dir", default=None, help="Run output directory.")
@click.option("--cache-dir", default=None, help="Response cache directory (COTRR_CACHE_DIR).")
@click.option("--parallelism", default=None, type=int, help="Concurrent requests and workers (default 8).")
@click.option("--failure-threshold", default=None, type=float, help="Abort when this fraction of records fails (default 0.1).")
@click.option("--attach-thumbnails", is_flag=True, default=None, help="Re-attach candidate thumbnails to ranking calls.")
@click.option("--prompts-dir", default=None, help="Directory of prompt template overrides.")
@click.option("--mock-labels", default=None, help="Relevance labels JSON for mock backends (default: labels.json beside the manifest).")
@click.option("--mock-script", default=None, help="Scripted replies JSON for the scripted mock.")
def cmd_run(config_path, **flags):
    """Re-rank every manifest query end to end and write a run report."""
    config = _load_config_file(config_path)
    unknown = set(config) - _CONFIG_KEYS
    if unknown:
        _fail(EXIT_CONFIG, f"unknown config keys: {', '.join(sorted(unknown))}")

    manifest = _pick(flags["manifest"], config, "manifest")
    if not manifest:
        _fail(EXIT_CONFIG, "--manifest is required")
    if not Path(manifest).exists():
        _fail(EXIT_CONFIG, f"manifest not found: {manifest}")
    profile_name = _pick(flags["profile_name"], config, "profile")
    if not profile_name:
        _fail(EXIT_CONFIG, "--profile is required")
    if profile_name not in PROFILES:
        _fail(EXIT_CONFIG, f"unknown profile {profile_name!r} (have: {', '.join(PROFILES)})")
    profile = PROFILES[profile_name]
    mode = _pick(flags["mode"], config, "mode", default="R+D+E")
    if mode not in MODES:
        _fail(EXIT_CONFIG, f"mode must be one of {', '.join(MODES)}, got {mode!r}")

    k_rerank = _pick(flags["k_rerank"], config, "k_rerank")
    k_subset = _pick(flags["k_subset"], config, "k_subset")
    if k_rerank is not None:
        if int(k_rerank) < 1:
            _fail(EXIT_CONFIG, "k_rerank must be >= 1")
        profile = dataclasses.replace(profile, k_rerank=int(k_rerank))
    if k_subset is not None:
        if int(k_subset) < 1:
            _fail(EXIT_CONFIG, "k_subset must be >= 1")
        profile = dataclasses.replace(profile, k_subset=int(k_subset))

    backend_spec = _pick(
        flags["backend_spec"], config, "backend", env="COTRR_BASE_URL"
    )
    if not backend_spec:
        _fail(EXIT_CONFIG, "--backend is required (endpoint URL or mock:<kind>)")
    model = _pick(flags["model"], config, "model", default=DEFAULT_MODEL)
    temperature = float(_pick(flags["temperature"], config, "temperature", default=0.0))
    cache_dir = _pick(flags["cache_dir"], config, "cache_dir", env="COTRR_CACHE_DIR")
    parallelism = int(_pick(flags["parallelism"], config, "parallelism", default=8))
    if parallelism < 1:
        _fail(EXIT_CONFIG, "parallelism must be >= 1")
    failure_threshold = float(
        _pick(flags["failure_threshold"], config, "failure_threshold", default=0.10)
    )
    attach_thumbnails = bool(
        _pick(flags["attach_thumbnails"], config, "attach_thumbnails", default=False)
    )
    prompts_dir = _pick(flags["prompts_dir"], config, "prompts_dir")
    image_root = _pick(flags["image_root"], config, "image_root")
    if not image_root:
        _fail(EXIT_CONFIG, "--image-root is required (candidate images)")
    out_dir = _pick(flags["out_dir"], config, "out", default="runs/latest")
    image_store_path = _pick(flags["image_store"], config, "image_store")
    query_store_path = _pick(flags["query_store"], config, "query_store")

    mock_labels = _pick(flags["mock_labels"], config, "mock_labels")
    if mock_labels is None and backend_spec.startswith("mock:"):
        default_labels = Path(manifest).with_name("labels.json")
        if default_labels.exists():
            mock_labels = str(default_labels)
    mock_script = _pick(flags["mock_script"], config, "mock_script")

    image_store = _load_store_or_fail(image_store_path, "image store")
    query_store = _load_store_or_fail(query_store_path, "query store")
    backend = _build_backend(
        backend_spec, model, temperature, cache_dir, parallelism,
        mock_labels, mock_script,
    )

    config_echo = {
        "manifest": str(manifest),
        "profile": profile_name,
        "task": profile.task,
        "k_rerank": profile.k_rerank,
        "k_subset": profile.k_subset,
        "metrics": [f"{name}@{k}" for name, k in profile.metrics],
        "mode": mode,
        "backend": backend_spec,
        "model": model,
        "temperature": temperature,
        "parallelism": parallelism,
        "failure_threshold": failure_threshold,
        "attach_thumbnails": attach_thumbnails,
        "prompts_dir": prompts_dir,
        "image_store": image_store_path,
        "query_store": query_store_path,
        "image_root": str(image_root),
        "mock_labels": mock_labels,
        "mock_script": mock_script,
    }

    try:
        report = run_harness(
            manifest,
            profile,
            backend,
            out_dir,
            mode=mode,
            image_store=image_store,
            query_store=query_store,
            image_root=image_root,
            prompts=PromptLibrary(override_dir=prompts_dir),
            parallelism=parallelism,
            failure_threshold=failure_threshold,
            attach_thumbnails=attach_thumbnails,
            config_echo=config_echo,
        )
    except ManifestError as exc:
        _fail(EXIT_VALIDATION, f"{manifest}: {exc}")
    except RunAborted as exc:
        _fail(EXIT_ABORTED, str(exc))

    click.echo(f"run complete: {out_dir}")
    for key in sorted(report.aggregates):
        click.echo(f"  {key} = {report.aggregates[key]:.4f}")
    if report.degradation:
        summary = ", ".join(
            f"{k}={v}" for k, v in sorted(report.degradation.items())
        )
        click.echo(f"  degradation: {summary}")
    if report.failures:
        click.echo(f"  failures: {len(report.failures)}", err=True)


@main.command("report")
@click.argument("run_dirs", nargs=-1, required=True)
@click.option("--out-csv", default=None, help="Write a merged chart CSV here.")
def cmd_report(run_dirs, out_csv):
    """Print an aligned aggregate table across one or more runs."""
    reports = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "report.json"
        try:
            reports.append(MetricReport.from_json(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            _fail(EXIT_CONFIG, f"no report.json under {run_dir}")
        except (ValueError, KeyError) as exc:
            _fail(EXIT_VALIDATION, f"{path}: {exc}")

    labels = [Path(d).name or str(d) for d in run_dirs]
    key_sets = [set(r.aggregates) for r in reports]
    if len(reports) > 1 and len(set(map(frozenset, key_sets))) > 1:
        click.echo("note: runs carry different metric sets; missing cells show -", err=True)
    keys = sorted(set().union(*key_sets))

    header = ["metric"] + [
        f"{label} ({r.config.get('mode', '?')})" for label, r in zip(labels, reports)
    ]
    rows = [header]
    for key in keys:
        row = [key]
        for r in reports:
            row.append(f"{r.aggregates[key]:.4f}" if key in r.aggregates else "-")
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    for i, row in enumerate(rows):
        click.echo("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)))
        if i == 0:
            click.echo("  ".join("-" * w for w in widths))

    if out_csv:
        lines = ["run,round,variant,k,value"]
        for label, r in zip(labels, reports):
            for key in sorted(r.aggregates):
                parts = key.split("@")
                if len(parts) == 3 and parts[2].startswith("round"):
                    lines.append(
                        f"{label},{int(parts[2][5:])},{parts[0]},{int(parts[1])},"
                        f"{r.aggregates[key]}"
                    )
        Path(out_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
        click.echo(f"wrote {out_csv}")


if __name__ == "__main__":
    main()
