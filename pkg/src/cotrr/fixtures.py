"""Synthetic fixture generation for offline end-to-end runs.

The bundled fixture plants, for every query, a relevance label 0..N-1 on
each of its N candidates; the candidate labeled N-1 is the ground truth.
Candidate lists are shuffled with the ground truth never first, so the
initial ranking scores R@1 = 0 while an oracle backend that sorts by label
must reach R@1 = 1. Labels live in ``labels.json`` beside the manifest and
drive the oracle mock. Candidate images are tiny solid-color JPEGs derived
from the candidate id; they are cheap to regenerate, so only the manifest
and labels ship with the repo.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import random
from pathlib import Path

_SUBJECTS = (
    "a man", "two young men", "a woman in a hat", "a child", "a brown dog",
    "a cyclist", "a street vendor", "an elderly couple",
)
_ACTIVITIES = (
    "playing basketball", "reading a book", "crossing the street",
    "cooking dinner", "riding a bike", "walking along the shore",
    "painting a wall", "waiting for a bus",
)
_DETAILS = (
    "wearing a red jacket", "holding a camera", "with two friends nearby",
    "carrying a backpack", "next to a blue car", "behind a wooden fence",
    "with a striped umbrella", "holding a coffee cup",
)
_ENVIRONMENTS = (
    "indoors", "in a park", "on a city street", "at the beach",
    "in a small kitchen", "on an outdoor court", "in a covered market",
    "near a river",
)
_AMBIANCES = (
    "under bright light", "at dusk", "in light rain", "on a sunny day",
    "in dim light", "under neon signs", "in morning fog", "at golden hour",
)


def candidate_color(candidate_id: str) -> tuple[int, int, int]:
    digest = hashlib.sha256(candidate_id.encode("utf-8")).digest()
    return digest[0], digest[1], digest[2]


def build_fixture(
    root: str | Path,
    queries: int = 200,
    candidates: int = 15,
    seed: int = 7,
) -> Path:
    """Write manifest.jsonl and labels.json for a planted-relevance fixture."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    labels: dict[str, int] = {}
    lines = []
    for qi in range(queries):
        qid = f"q{qi:04d}"
        cids = [f"{qid}_c{j:02d}" for j in range(candidates)]
        planted = list(range(candidates))
        rng.shuffle(planted)
        for cid, label in zip(cids, planted):
            labels[cid] = label
        gt = cids[planted.index(candidates - 1)]
        order = list(cids)
        while True:
            rng.shuffle(order)
            if order[0] != gt:
                break
        text = (
            f"{_SUBJECTS[qi % len(_SUBJECTS)]} "
            f"{_ACTIVITIES[(qi // 3) % len(_ACTIVITIES)]} "
            f"{_ENVIRONMENTS[(qi // 7) % len(_ENVIRONMENTS)]} "
            f"{_AMBIANCES[(qi // 11) % len(_AMBIANCES)]}, "
            f"{_DETAILS[(qi // 5) % len(_DETAILS)]}"
        )
        lines.append(
            json.dumps(
                {
                    "query_id": qid,
                    "task": "tir",
                    "text": text,
                    "ground_truth": [gt],
                    "candidates": order,
                },
                sort_keys=True,
            )
        )
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "labels.json").write_text(
        json.dumps(labels, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return root


def materialize_images(root: str | Path) -> Path:
    """Create the fixture's candidate images (idempotent, labels-driven)."""
    from PIL import Image

    root = Path(root)
    labels = json.loads((root / "labels.json").read_text(encoding="utf-8"))
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    for cid in labels:
        path = images / f"{cid}.jpg"
        if path.exists():
            continue
        Image.new("RGB", (16, 16), candidate_color(cid)).save(path, format="JPEG")
    return images


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Build the planted-relevance fixture (manifest, labels, images)."
    )
    parser.add_argument("root", help="fixture directory")
    parser.add_argument("--queries", type=int, default=200)
    parser.add_argument("--candidates", type=int, default=15)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument(
        "--images-only",
        action="store_true",
        help="only regenerate images for an existing manifest",
    )
    args = parser.parse_args(argv)
    if not args.images_only:
        build_fixture(args.root, args.queries, args.candidates, args.seed)
    materialize_images(args.root)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
