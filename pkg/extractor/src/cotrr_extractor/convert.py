"""Converters from native dataset annotation files to canonical manifests.

Each converter reads the dataset's published annotation layout and emits
JSON-lines records in the engine's manifest schema: ``tir`` records with
query text and one ground-truth image, ``cir`` records with a reference
image and modification text (CIRR adds its 6-member subset, CIRCO its
multiple ground truths), and ``chat`` records with a caption plus the
question-answer rounds.

Any missing or mistyped key in a native file is schema drift and fails
fast, naming the file and the key.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

DATASETS = ("karpathy-tir", "cirr", "circo", "visdial")

CIRR_SUBSET_SIZE = 6


class SchemaDriftError(ValueError):
    """A native annotation file does not match its published layout."""

    def __init__(self, path: str | Path, key: str, detail: str):
        super().__init__(f"{path}: key {key!r}: {detail}")
        self.path = str(path)
        self.key = key


def _load_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaDriftError(path, "<root>", f"not valid JSON ({exc})") from exc


def _need(obj: Mapping, key: str, path: Path, kind: type, where: str):
    value = obj.get(key)
    if not isinstance(value, kind) or (kind is str and not value.strip()):
        raise SchemaDriftError(path, key, f"missing or wrong type in {where}")
    return value


def _stem(filename: str) -> str:
    return Path(filename).stem


def convert_karpathy_tir(path: str | Path, split: str = "test") -> list[dict]:
    """Karpathy caption splits (Flickr30K / MSCOCO) to tir query records.

    Every caption of every image in the chosen split becomes one query
    whose ground truth is that image.
    """
    path = Path(path)
    payload = _load_json(path)
    images = _need(payload, "images", path, list, "top level")
    records = []
    for image in images:
        if not isinstance(image, dict):
            raise SchemaDriftError(path, "images", "entry is not an object")
        if _need(image, "split", path, str, "image entry") != split:
            continue
        filename = _need(image, "filename", path, str, "image entry")
        sentences = _need(image, "sentences", path, list, "image entry")
        image_id = _stem(filename)
        for i, sentence in enumerate(sentences):
            if not isinstance(sentence, dict):
                raise SchemaDriftError(path, "sentences", "entry is not an object")
            raw = _need(sentence, "raw", path, str, "sentence entry")
            records.append(
                {
                    "query_id": f"{image_id}#{i}",
                    "task": "tir",
                    "text": raw.strip(),
                    "ground_truth": [image_id],
                }
            )
    if not records:
        raise SchemaDriftError(path, "split", f"no images in split {split!r}")
    return records


def convert_cirr(path: str | Path) -> list[dict]:
    """CIRR caption annotations to cir records with the native 6-image subset."""
    path = Path(path)
    payload = _load_json(path)
    if not isinstance(payload, list) or not payload:
        raise SchemaDriftError(path, "<root>", "expected a non-empty list of pairs")
    records = []
    for entry in payload:
        if not isinstance(entry, dict):
            raise SchemaDriftError(path, "<root>", "pair entry is not an object")
        pairid = entry.get("pairid")
        if not isinstance(pairid, int):
            raise SchemaDriftError(path, "pairid", "missing or wrong type in pair")
        reference = _need(entry, "reference", path, str, "pair")
        target = _need(entry, "target_hard", path, str, "pair")
        caption = _need(entry, "caption", path, str, "pair")
        img_set = _need(entry, "img_set", path, dict, "pair")
        members = _need(img_set, "members", path, list, "img_set")
        if len(members) != CIRR_SUBSET_SIZE or any(
            not isinstance(m, str) or not m for m in members
        ):
            raise SchemaDriftError(
                path, "members", f"expected {CIRR_SUBSET_SIZE} image ids"
            )
        if target not in members:
            raise SchemaDriftError(path, "members", f"target {target!r} not in set")
        records.append(
            {
                "query_id": str(pairid),
                "task": "cir",
                "reference_image": reference,
                "manipulation_text": caption.strip(),
                "ground_truth": [target],
                "subset": list(members),
            }
        )
    return records


def _coco_image_id(value: int) -> str:
    # COCO file stems are the numeric id zero-padded to 12 digits.
    return f"{value:012d}"


def convert_circo(path: str | Path) -> list[dict]:
    """CIRCO annotations to cir records carrying every annotated ground truth."""
    path = Path(path)
    payload = _load_json(path)
    if not isinstance(payload, list) or not payload:
        raise SchemaDriftError(path, "<root>", "expected a non-empty list")
    records = []
    for entry in payload:
        if not isinstance(entry, dict):
            raise SchemaDriftError(path, "<root>", "entry is not an object")
        query_id = entry.get("id")
        if not isinstance(query_id, int):
            raise SchemaDriftError(path, "id", "missing or wrong type in entry")
        reference = entry.get("reference_img_id")
        if not isinstance(reference, int):
            raise SchemaDriftError(path, "reference_img_id", "missing or wrong type")
        caption = _need(entry, "relative_caption", path, str, "entry")
        gts = entry.get("gt_img_ids")
        if gts is None:
            # unannotated splits still carry the single target
            target = entry.get("target_img_id")
            if not isinstance(target, int):
                raise SchemaDriftError(
                    path, "gt_img_ids", "absent and no target_img_id fallback"
                )
            gts = [target]
        if (
            not isinstance(gts, list)
            or not gts
            or any(not isinstance(g, int) for g in gts)
        ):
            raise SchemaDriftError(path, "gt_img_ids", "expected a list of image ids")
        records.append(
            {
                "query_id": str(query_id),
                "task": "cir",
                "reference_image": _coco_image_id(reference),
                "manipulation_text": caption.strip(),
                "ground_truth": [_coco_image_id(g) for g in gts],
            }
        )
    return records


def convert_visdial(path: str | Path) -> list[dict]:
    """VisDial dialogs to chat records with resolved question-answer text."""
    path = Path(path)
    payload = _load_json(path)
    data = _need(payload, "data", path, dict, "top level")
    split = _need(payload, "split", path, str, "top level")
    dialogs = _need(data, "dialogs", path, list, "data")
    questions = _need(data, "questions", path, list, "data")
    answers = _need(data, "answers", path, list, "data")
    records = []
    for dialog in dialogs:
        if not isinstance(dialog, dict):
            raise SchemaDriftError(path, "dialogs", "entry is not an object")
        image_id = dialog.get("image_id")
        if not isinstance(image_id, int):
            raise SchemaDriftError(path, "image_id", "missing or wrong type")
        caption = _need(dialog, "caption", path, str, "dialog")
        rounds = _need(dialog, "dialog", path, list, "dialog")
        pairs = []
        for turn in rounds:
            if not isinstance(turn, dict):
                raise SchemaDriftError(path, "dialog", "round is not an object")
            q, a = turn.get("question"), turn.get("answer")
            if not isinstance(q, int) or not 0 <= q < len(questions):
                raise SchemaDriftError(path, "question", f"index {q!r} out of range")
            if not isinstance(a, int) or not 0 <= a < len(answers):
                raise SchemaDriftError(path, "answer", f"index {a!r} out of range")
            pairs.append([str(questions[q]), str(answers[a])])
        item_id = f"VisualDialog_{split}_{_coco_image_id(image_id)}"
        records.append(
            {
                "query_id": item_id,
                "task": "chat",
                "caption": caption.strip(),
                "dialogue": pairs,
                "ground_truth": [item_id],
            }
        )
    if not records:
        raise SchemaDriftError(path, "dialogs", "no dialogs in file")
    return records


_CONVERTERS: dict[str, Callable[..., list[dict]]] = {
    "karpathy-tir": convert_karpathy_tir,
    "cirr": convert_cirr,
    "circo": convert_circo,
    "visdial": convert_visdial,
}


def convert_manifest(dataset: str, path: str | Path, **kwargs) -> list[dict]:
    """Dispatch to the converter for ``dataset`` and validate uniqueness."""
    if dataset not in _CONVERTERS:
        raise SchemaDriftError(
            path, "dataset", f"unknown tag {dataset!r}; expected one of {DATASETS}"
        )
    records = _CONVERTERS[dataset](path, **kwargs)
    seen = set()
    for record in records:
        qid = record["query_id"]
        if qid in seen:
            raise SchemaDriftError(path, "query_id", f"duplicate {qid!r}")
        seen.add(qid)
    return records


def write_manifest(records: Iterable[Mapping], path: str | Path) -> int:
    """Write records as JSON lines; returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(dict(record), ensure_ascii=False) + "\n")
            count += 1
    return count
