"""Shared fixtures: a tiny on-disk image corpus and a scripted mock backend."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from PIL import Image

from bettercheck.selfcheck import sentence_text_digest

FIXTURE_DIR = Path(__file__).parent / "fixtures"

# 10 images, 3 repeats, 5 sentences per caption. The first 6 images carry one
# planted sentence in repeat 0 that the scripted checker rejects twice.
N_IMAGES = 10
N_PLANTED = 6
SCENARIO = "s00"

BASE_SENTENCES = [
    "There are cars.",
    "There are trees.",
    "There are buildings.",
    "There are people.",
    "There are signs.",
]

AGENTS_BY_IMAGE = {
    0: ["vehicle", "pedestrian"],
    1: ["vehicle"],
    2: ["vehicle", "sign"],
    3: ["pedestrian", "sign"],
    4: [],
    5: ["vehicle", "pedestrian", "sign"],
    6: ["cyclist"],
    7: ["vehicle", "unknown"],
    8: ["sign"],
    9: ["vehicle", "pedestrian"],
}


def planted_sentence(i: int) -> str:
    return f"There are ghost hydrants number {i}."


def image_id_for(i: int) -> str:
    return f"{SCENARIO}/{i * 10:04d}"


def write_images(image_dir: Path) -> None:
    scenario_dir = image_dir / SCENARIO
    scenario_dir.mkdir(parents=True, exist_ok=True)
    for i in range(N_IMAGES):
        img = Image.new("RGB", (8, 8), color=(i * 20 % 256, 80, 120))
        img.save(scenario_dir / f"{i * 10:04d}.png")


def write_labels(labels_path: Path) -> None:
    with open(labels_path, "w", encoding="utf-8") as fh:
        for i in range(N_IMAGES):
            fh.write(json.dumps({"image_id": image_id_for(i), "agents": AGENTS_BY_IMAGE[i]}) + "\n")


def caption_text(i: int, repeat: int) -> str:
    sentences = list(BASE_SENTENCES)
    if repeat == 0 and i < N_PLANTED:
        sentences.insert(2, planted_sentence(i))
    return " ".join(sentences)


def write_mock_script(script_path: Path) -> None:
    with open(script_path, "w", encoding="utf-8") as fh:
        for i in range(N_IMAGES):
            for repeat in range(3):
                fh.write(
                    json.dumps(
                        {
                            "image_id": image_id_for(i),
                            "prompt_kind": "caption",
                            "repeat_index": repeat,
                            "response": caption_text(i, repeat),
                        }
                    )
                    + "\n"
                )
        for i in range(N_PLANTED):
            fh.write(
                json.dumps(
                    {
                        "image_id": image_id_for(i),
                        "prompt_kind": "check",
                        "sentence_digest": sentence_text_digest(planted_sentence(i)),
                        "response": "No",
                    }
                )
                + "\n"
            )


@pytest.fixture
def fixture_corpus(tmp_path):
    """Image dir + labels + mock script for the 10-image pipeline fixture."""
    image_dir = tmp_path / "images"
    labels = tmp_path / "labels.jsonl"
    script = tmp_path / "mock_script.jsonl"
    write_images(image_dir)
    write_labels(labels)
    write_mock_script(script)
    return {"image_dir": image_dir, "labels": labels, "script": script, "tmp": tmp_path}
