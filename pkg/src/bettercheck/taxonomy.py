"""Mapping caption text onto the five traffic-agent classes and building confusion counts."""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import AGENT_CLASSES

_WORD_RE = re.compile(r"[a-z]+")


class TaxonomyError(Exception):
    pass


@dataclass(frozen=True)
class Lexicon:
    """class -> phrases; each phrase is a tuple of lowercase tokens."""

    version: str
    phrases: Mapping[str, tuple[tuple[str, ...], ...]]

    def __post_init__(self):
        seen: dict[tuple[str, ...], str] = {}
        for cls, cls_phrases in self.phrases.items():
            if cls not in AGENT_CLASSES:
                raise TaxonomyError(f"lexicon names unknown class {cls!r}")
            for phrase in cls_phrases:
                if not phrase:
                    raise TaxonomyError(f"empty phrase under class {cls!r}")
                if phrase in seen and seen[phrase] != cls:
                    raise TaxonomyError(
                        f"phrase {' '.join(phrase)!r} maps to both {seen[phrase]!r} and {cls!r}"
                    )
                seen[phrase] = cls


@dataclass(frozen=True)
class ConfusionMatrix:
    class_name: str
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def tokenize(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def load_lexicon(path: Path | str) -> Lexicon:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    version = str(data.pop("version", "unversioned"))
    phrases = {
        cls: tuple(tuple(tokenize(p)) for p in cls_phrases) for cls, cls_phrases in data.items()
    }
    return Lexicon(version=version, phrases=phrases)


def default_lexicon() -> Lexicon:
    with resources.as_file(resources.files("bettercheck").joinpath("data/lexicon.toml")) as path:
        return load_lexicon(path)


def _contains_phrase(tokens: list[str], phrase: tuple[str, ...]) -> bool:
    n = len(phrase)
    return any(tuple(tokens[i : i + n]) == phrase for i in range(len(tokens) - n + 1))


def extract_agents(sentence_text: str, lexicon: Lexicon) -> frozenset[str]:
    """Classes whose lexicon phrases occur in the sentence (word-boundary matched)."""
    tokens = tokenize(sentence_text)
    return frozenset(
        cls
        for cls, cls_phrases in lexicon.phrases.items()
        if any(_contains_phrase(tokens, p) for p in cls_phrases)
    )


def caption_agents(caption_sentences: Iterable[str], lexicon: Lexicon) -> frozenset[str]:
    agents: frozenset[str] = frozenset()
    for text in caption_sentences:
        agents |= extract_agents(text, lexicon)
    return agents


def confusion(
    detections: Mapping[str, frozenset[str]],
    ground_truth: Mapping[str, frozenset[str]],
    class_name: str,
) -> ConfusionMatrix:
    """Image-level presence/absence confusion for one agent class."""
    if set(detections) != set(ground_truth):
        diff = sorted(set(detections) ^ set(ground_truth))
        raise TaxonomyError(f"detection and ground-truth image sets differ: {diff}")
    tp = fp = fn = tn = 0
    for image_id, detected in detections.items():
        in_det = class_name in detected
        in_gt = class_name in ground_truth[image_id]
        if in_det and in_gt:
            tp += 1
        elif in_det:
            fp += 1
        elif in_gt:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(class_name=class_name, tp=tp, fp=fp, fn=fn, tn=tn)
