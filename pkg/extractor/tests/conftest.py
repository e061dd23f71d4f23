import json

import pytest
from PIL import Image


@pytest.fixture()
def image_dir(tmp_path):
    root = tmp_path / "images"
    root.mkdir()
    for i in range(8):
        Image.new("RGB", (12, 12), (i * 31 % 255, 90, 200 - i * 10)).save(
            root / f"img{i}.jpg", format="JPEG"
        )
    return root


@pytest.fixture()
def image_listing(tmp_path, image_dir):
    listing = tmp_path / "listing.txt"
    listing.write_text(
        "".join(f"images/img{i}.jpg\n" for i in range(8)), encoding="utf-8"
    )
    return listing


@pytest.fixture()
def karpathy_file(tmp_path):
    payload = {
        "dataset": "flickr30k",
        "images": [
            {
                "filename": "1000092795.jpg",
                "split": "test",
                "sentences": [
                    {"raw": "Two dogs run across a field."},
                    {"raw": "A pair of dogs sprinting on grass."},
                ],
            },
            {
                "filename": "1000268201.jpg",
                "split": "train",
                "sentences": [{"raw": "A child climbs stairs."}],
            },
            {
                "filename": "1001573224.jpg",
                "split": "test",
                "sentences": [{"raw": "Musicians play on stage."}],
            },
        ],
    }
    path = tmp_path / "dataset_flickr30k.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


@pytest.fixture()
def cirr_file(tmp_path):
    def pair(pairid, ref, target, members):
        return {
            "pairid": pairid,
            "reference": ref,
            "target_hard": target,
            "caption": f"make it like {target}",
            "img_set": {"id": pairid, "members": members},
        }

    payload = [
        pair(11, "dev-10-0-img0", "dev-10-0-img1",
             ["dev-10-0-img0", "dev-10-0-img1", "dev-11", "dev-12", "dev-13", "dev-14"]),
        pair(12, "dev-20-0-img0", "dev-22",
             ["dev-20-0-img0", "dev-21", "dev-22", "dev-23", "dev-24", "dev-25"]),
    ]
    path = tmp_path / "cap.rc2.val.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


@pytest.fixture()
def circo_file(tmp_path):
    payload = [
        {
            "id": 0,
            "reference_img_id": 27,
            "target_img_id": 103,
            "gt_img_ids": [103, 7741, 58113],
            "relative_caption": "has two cats instead of one",
        },
        {
            "id": 1,
            "reference_img_id": 88,
            "target_img_id": 910,
            "gt_img_ids": [910],
            "relative_caption": "shows the bike leaning on a wall",
        },
    ]
    path = tmp_path / "circo_val.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


@pytest.fixture()
def visdial_file(tmp_path):
    questions = [f"question {i}" for i in range(12)]
    answers = [f"answer {i}" for i in range(12)]
    dialogs = [
        {
            "image_id": 185565,
            "caption": "a cat sits on a couch",
            "dialog": [{"question": t, "answer": (t + 1) % 12} for t in range(10)],
        },
        {
            "image_id": 284024,
            "caption": "a man rides a horse",
            "dialog": [{"question": (t + 2) % 12, "answer": t} for t in range(10)],
        },
    ]
    payload = {
        "version": "1.0",
        "split": "val2018",
        "data": {"dialogs": dialogs, "questions": questions, "answers": answers},
    }
    path = tmp_path / "visdial_1.0_val.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path
