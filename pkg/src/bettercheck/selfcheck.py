"""Consistency checking of caption sentences against the other repeats, and filtering."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .captioner import Caption, SentenceUnit, caption_from_record
from .gateway import Gateway, GenerationRequest
from .stores import read_jsonl, write_jsonl

DEFAULT_THRESHOLD = Fraction(1, 2)
DEFAULT_REFERENCE_REPEAT = 0

CHECK_QUESTION = "Is the sentence supported by the context above? Answer Yes or No:"

_FIRST_TOKEN_RE = re.compile(r"[a-z]+")


class SelfCheckError(Exception):
    """A scoring or filtering precondition failed."""


@dataclass(frozen=True)
class CheckVerdict:
    sentence_id: str
    context_repeat_index: int
    raw_reply: str
    verdict: str  # yes | no | unparseable


@dataclass(frozen=True)
class ConsistencyScore:
    sentence_id: str
    yes_count: int
    total: int
    unparseable_count: int = 0

    @property
    def score(self) -> Fraction:
        return Fraction(self.yes_count, self.total)


@dataclass
class FilteredCaption:
    image_id: str
    model: str
    threshold: Fraction
    retained: list[SentenceUnit]
    excluded: list[tuple[SentenceUnit, Fraction]]


def check_prompt(context: str, sentence: str) -> str:
    if not context or not sentence:
        raise ValueError("context and sentence must be non-empty")
    return f"Context: {context}  Sentence: {sentence}\n{CHECK_QUESTION}"


def parse_verdict(raw_reply: str) -> str:
    match = _FIRST_TOKEN_RE.search(raw_reply.strip().lower())
    if match is None:
        return "unparseable"
    token = match.group(0)
    if token == "yes":
        return "yes"
    if token == "no":
        return "no"
    return "unparseable"


def sentence_text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def score_sentence(
    sentence: SentenceUnit,
    own: Caption,
    captions: list[Caption],
    checker_model: str,
    gateway: Gateway,
) -> tuple[ConsistencyScore, list[CheckVerdict]]:
    """Check one sentence against every caption except the one it came from.

    Unparseable replies count as "no" (conservative) but are tallied separately.
    """
    contexts = sorted(
        (c for c in captions if c.repeat_index != own.repeat_index),
        key=lambda c: c.repeat_index,
    )
    if not contexts:
        raise SelfCheckError(f"no context captions for sentence {sentence.sentence_id}")
    verdicts: list[CheckVerdict] = []
    for ctx in contexts:
        req = GenerationRequest(
            model=checker_model,
            prompt=check_prompt(ctx.raw_text, sentence.text),
            repeat_index=ctx.repeat_index,
            image_id=own.image_id,
            prompt_kind="check",
            sentence_digest=sentence_text_digest(sentence.text),
        )
        try:
            resp = gateway.generate(req)
        except Exception as exc:
            raise SelfCheckError(f"check failed for sentence {sentence.sentence_id}: {exc}") from exc
        verdicts.append(
            CheckVerdict(
                sentence_id=sentence.sentence_id,
                context_repeat_index=ctx.repeat_index,
                raw_reply=resp.text,
                verdict=parse_verdict(resp.text),
            )
        )
    yes_count = sum(1 for v in verdicts if v.verdict == "yes")
    unparseable = sum(1 for v in verdicts if v.verdict == "unparseable")
    score = ConsistencyScore(
        sentence_id=sentence.sentence_id,
        yes_count=yes_count,
        total=len(contexts),
        unparseable_count=unparseable,
    )
    return score, verdicts


def filter_caption(
    caption: Caption,
    scores: dict[str, ConsistencyScore],
    threshold: Fraction | float = DEFAULT_THRESHOLD,
) -> FilteredCaption:
    """Keep sentences whose consistency score reaches the threshold (inclusive)."""
    threshold = Fraction(threshold)
    retained: list[SentenceUnit] = []
    excluded: list[tuple[SentenceUnit, Fraction]] = []
    for sentence in caption.sentences:
        if sentence.sentence_id not in scores:
            raise SelfCheckError(f"no consistency score for sentence {sentence.sentence_id}")
        score = scores[sentence.sentence_id].score
        if score >= threshold:
            retained.append(sentence)
        else:
            excluded.append((sentence, score))
    return FilteredCaption(
        image_id=caption.image_id,
        model=caption.model,
        threshold=threshold,
        retained=retained,
        excluded=excluded,
    )


def load_captions(run_dir: Path | str) -> list[Caption]:
    return [caption_from_record(rec) for _, rec in read_jsonl(Path(run_dir) / "captions.jsonl")]


def run_checks(run_dir: Path | str, checker_model: str, gateway: Gateway) -> int:
    """Score every sentence of every repeat; write checks.jsonl sorted for determinism.

    Resumption comes for free when the gateway has a record-mode cache: completed
    (sentence, context) pairs replay instead of hitting the backend.
    """
    run_dir = Path(run_dir)
    captions = load_captions(run_dir)
    groups: dict[tuple[str, str], list[Caption]] = {}
    for c in captions:
        groups.setdefault((c.image_id, c.model), []).append(c)

    rows: list[dict] = []
    for (image_id, model), group in sorted(groups.items()):
        group.sort(key=lambda c: c.repeat_index)
        for caption in group:
            for sentence in caption.sentences:
                _, verdicts = score_sentence(sentence, caption, group, checker_model, gateway)
                for v in verdicts:
                    rows.append(
                        {
                            "sentence_id": v.sentence_id,
                            "image_id": image_id,
                            "model": model,
                            "checker_model": checker_model,
                            "repeat_index": caption.repeat_index,
                            "ordinal": sentence.ordinal,
                            "context_repeat_index": v.context_repeat_index,
                            "raw_reply": v.raw_reply,
                            "verdict": v.verdict,
                        }
                    )
    rows.sort(key=lambda r: (r["image_id"], r["repeat_index"], r["ordinal"], r["context_repeat_index"]))
    write_jsonl(run_dir / "checks.jsonl", rows)
    return len(rows)


def scores_from_checks(run_dir: Path | str) -> dict[str, ConsistencyScore]:
    """Rebuild per-sentence consistency scores from the checks store."""
    by_sentence: dict[str, list[str]] = {}
    for _, rec in read_jsonl(Path(run_dir) / "checks.jsonl"):
        by_sentence.setdefault(rec["sentence_id"], []).append(rec["verdict"])
    return {
        sid: ConsistencyScore(
            sentence_id=sid,
            yes_count=sum(1 for v in verdicts if v == "yes"),
            total=len(verdicts),
            unparseable_count=sum(1 for v in verdicts if v == "unparseable"),
        )
        for sid, verdicts in by_sentence.items()
    }


def run_filter(
    run_dir: Path | str,
    threshold: Fraction | float = DEFAULT_THRESHOLD,
    reference_repeat: int = DEFAULT_REFERENCE_REPEAT,
) -> int:
    """Filter the reference-repeat caption of every image; write filtered.jsonl."""
    run_dir = Path(run_dir)
    threshold = Fraction(threshold)
    captions = load_captions(run_dir)
    scores = scores_from_checks(run_dir)

    rows: list[dict] = []
    for caption in sorted(
        (c for c in captions if c.repeat_index == reference_repeat),
        key=lambda c: (c.image_id, c.model),
    ):
        filtered = filter_caption(caption, scores, threshold)
        rows.append(
            {
                "image_id": filtered.image_id,
                "model": filtered.model,
                "threshold": float(filtered.threshold),
                "retained": [s.sentence_id for s in filtered.retained],
                "excluded": [
                    {"sentence_id": s.sentence_id, "score": float(score)} for s, score in filtered.excluded
                ],
            }
        )
    write_jsonl(run_dir / "filtered.jsonl", rows)
    return len(rows)
