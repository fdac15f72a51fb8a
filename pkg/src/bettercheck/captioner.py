"""Repeated image captioning and sentence decomposition with length filtering."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import ImageRecord
from .gateway import Gateway, GenerationRequest
from .stores import text_digest

CAPTION_PROMPT = (
    "Describe the different objects visible in the image. Please write very simple and "
    'clear sentences. Use the format: "There are [object]." For example, "There are cars. '
    'There are people. There are cyclists." Look carefully and make sure to mention all '
    "types of objects you see, especially people. If there are multiple types of objects "
    "in the image, provide a separate sentence for each type."
)

DEFAULT_MAX_SENTENCE_LEN = 50
DEFAULT_REPEATS = 3

_TEMPLATE_RE = re.compile(r"^there (are|is) .+\.$", re.IGNORECASE)


class CaptioningError(Exception):
    """A repeat failed; carries the captions that did succeed for resumption."""

    def __init__(self, message: str, successes: list["Caption"]):
        self.successes = successes
        super().__init__(message)


@dataclass(frozen=True)
class SentenceUnit:
    sentence_id: str
    ordinal: int
    text: str
    template_conformant: bool


@dataclass
class Caption:
    image_id: str
    model: str
    repeat_index: int
    raw_text: str
    sentences: list[SentenceUnit]
    discarded: list[dict] = field(default_factory=list)
    latency_ms: int = 0


def caption_prompt() -> str:
    return CAPTION_PROMPT


def split_segments(raw_text: str) -> list[str]:
    """Raw split at '.', '?', '!' followed by whitespace or end of text.

    Character-preserving: ''.join(split_segments(x)) == x.
    """
    segments: list[str] = []
    buf: list[str] = []
    n = len(raw_text)
    for i, ch in enumerate(raw_text):
        buf.append(ch)
        if ch in ".?!" and (i + 1 == n or raw_text[i + 1].isspace()):
            segments.append("".join(buf))
            buf = []
    if buf:
        segments.append("".join(buf))
    return segments


def segment(raw_text: str, max_sentence_len: int = DEFAULT_MAX_SENTENCE_LEN) -> tuple[list[str], list[dict]]:
    """Split into trimmed sentences; over-long segments land in discarded.

    Every non-whitespace character of the input survives in exactly one of the
    two lists; both keep original order.
    """
    sentences: list[str] = []
    discarded: list[dict] = []
    for seg in split_segments(raw_text):
        seg = seg.strip()
        if not seg:
            continue
        if len(seg) > max_sentence_len:
            discarded.append({"text": seg, "reason": "too_long"})
        else:
            sentences.append(seg)
    return sentences, discarded


def is_template_conformant(sentence: str) -> bool:
    return bool(_TEMPLATE_RE.match(sentence.strip()))


def decompose(
    image_id: str,
    model: str,
    repeat_index: int,
    raw_text: str,
    latency_ms: int = 0,
    max_sentence_len: int = DEFAULT_MAX_SENTENCE_LEN,
) -> Caption:
    texts, discarded = segment(raw_text, max_sentence_len=max_sentence_len)
    units = [
        SentenceUnit(
            sentence_id=text_digest(image_id, model, repeat_index, ordinal),
            ordinal=ordinal,
            text=text,
            template_conformant=is_template_conformant(text),
        )
        for ordinal, text in enumerate(texts)
    ]
    return Caption(
        image_id=image_id,
        model=model,
        repeat_index=repeat_index,
        raw_text=raw_text,
        sentences=units,
        discarded=discarded,
        latency_ms=latency_ms,
    )


def caption_image(
    image: ImageRecord,
    model: str,
    gateway: Gateway,
    image_root: Path | str,
    repeats: int = DEFAULT_REPEATS,
    temperature: float | None = None,
    max_sentence_len: int = DEFAULT_MAX_SENTENCE_LEN,
) -> list[Caption]:
    """Generate `repeats` independent captions for one image (the BO3 strategy)."""
    if repeats < 2:
        raise ValueError("repeats must be >= 2: consistency checking needs at least one other caption")
    image_bytes = (Path(image_root) / image.path).read_bytes()
    captions: list[Caption] = []
    for repeat_index in range(repeats):
        req = GenerationRequest(
            model=model,
            prompt=CAPTION_PROMPT,
            image=image_bytes,
            repeat_index=repeat_index,
            temperature=temperature,
            image_id=image.image_id,
            prompt_kind="caption",
        )
        try:
            resp = gateway.generate(req)
        except Exception as exc:
            raise CaptioningError(
                f"caption repeat {repeat_index} failed for {image.image_id}: {exc}", successes=captions
            ) from exc
        captions.append(
            decompose(
                image.image_id,
                model,
                repeat_index,
                resp.text,
                latency_ms=resp.latency_ms,
                max_sentence_len=max_sentence_len,
            )
        )
    return captions


def caption_to_record(c: Caption) -> dict:
    return {
        "image_id": c.image_id,
        "model": c.model,
        "repeat_index": c.repeat_index,
        "raw_text": c.raw_text,
        "sentences": [
            {
                "sentence_id": s.sentence_id,
                "ordinal": s.ordinal,
                "text": s.text,
                "template_conformant": s.template_conformant,
            }
            for s in c.sentences
        ],
        "discarded": c.discarded,
        "latency_ms": c.latency_ms,
    }


def caption_from_record(rec: dict) -> Caption:
    return Caption(
        image_id=rec["image_id"],
        model=rec["model"],
        repeat_index=rec["repeat_index"],
        raw_text=rec["raw_text"],
        sentences=[
            SentenceUnit(
                sentence_id=s["sentence_id"],
                ordinal=s["ordinal"],
                text=s["text"],
                template_conformant=s["template_conformant"],
            )
            for s in rec["sentences"]
        ],
        discarded=list(rec.get("discarded", [])),
        latency_ms=rec.get("latency_ms", 0),
    )
