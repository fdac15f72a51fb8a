"""Classification metrics, Cohen's kappa, correctness summaries, and word frequencies."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

from .taxonomy import ConfusionMatrix, Lexicon, tokenize


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class MetricReport:
    """Per-matrix metrics; None marks an undefined value (zero denominator)."""

    tp: int
    fp: int
    fn: int
    tn: int
    precision: float | None
    recall: float | None
    f1: float | None
    accuracy: float | None
    specificity: float | None
    fpr: float | None
    fnr: float | None
    mcc: float | None

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "specificity": self.specificity,
            "fpr": self.fpr,
            "fnr": self.fnr,
            "mcc": self.mcc,
        }


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def f1_score(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def metrics(cm: ConfusionMatrix) -> MetricReport:
    tp, fp, fn, tn = cm.tp, cm.fp, cm.fn, cm.tn
    if tp + fp + fn + tn == 0:
        raise MetricsError("all-zero confusion matrix")
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(mcc_den) if mcc_den > 0 else None
    return MetricReport(
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        accuracy=_ratio(tp + tn, tp + fp + fn + tn),
        specificity=specificity,
        fpr=None if specificity is None else 1 - specificity,
        fnr=None if recall is None else 1 - recall,
        mcc=mcc,
    )


@dataclass(frozen=True)
class RaterPair:
    """Verdicts of two annotators over a shared item set: item_id -> (a, b)."""

    items: Mapping[str, tuple[str, str]]


def cohen_kappa(pair: RaterPair) -> float | None:
    """Chance-corrected agreement; None when chance agreement is 1 (degenerate)."""
    if not pair.items:
        raise MetricsError("empty overlap set")
    n = len(pair.items)
    observed = sum(1 for a, b in pair.items.values() if a == b) / n
    marginals_a = Counter(a for a, _ in pair.items.values())
    marginals_b = Counter(b for _, b in pair.items.values())
    labels = set(marginals_a) | set(marginals_b)
    expected = sum(marginals_a[lab] * marginals_b[lab] for lab in labels) / (n * n)
    if expected == 1:
        return None
    return (observed - expected) / (1 - expected)


@dataclass(frozen=True)
class CorrectnessSummary:
    sentence_pct: float
    caption_pct: float
    annotated_sentences: int
    contested_sentences: int


def majority_verdict(verdicts: Sequence[str]) -> str | None:
    """Majority vote over {correct, incorrect}; None on an exact tie (contested)."""
    counts = Counter(verdicts)
    correct, incorrect = counts.get("correct", 0), counts.get("incorrect", 0)
    if correct == incorrect:
        return None
    return "correct" if correct > incorrect else "incorrect"


def correctness_summary(
    sentence_verdicts: Mapping[str, Sequence[str]],
    captions: Sequence[Sequence[str]],
) -> CorrectnessSummary:
    """Sentence- and caption-level correctness from per-sentence human verdicts.

    `captions` lists each caption as its sentence ids. Contested sentences (exact
    vote ties) are excluded from the percentages but counted.
    """
    missing = sorted({sid for cap in captions for sid in cap} - set(sentence_verdicts))
    if missing:
        raise MetricsError(f"unannotated sentences: {missing}")
    resolved = {sid: majority_verdict(v) for sid, v in sentence_verdicts.items()}
    contested = sum(1 for v in resolved.values() if v is None)
    scored = {sid: v for sid, v in resolved.items() if v is not None}
    if not scored:
        raise MetricsError("no uncontested annotated sentences")
    sentence_pct = sum(1 for v in scored.values() if v == "correct") / len(scored)
    caption_hits = 0
    for cap in captions:
        judged = [resolved[sid] for sid in cap if resolved[sid] is not None]
        if all(v == "correct" for v in judged):
            caption_hits += 1
    caption_pct = caption_hits / len(captions) if captions else 0.0
    return CorrectnessSummary(
        sentence_pct=sentence_pct,
        caption_pct=caption_pct,
        annotated_sentences=len(scored),
        contested_sentences=contested,
    )


def default_stoplist() -> frozenset[str]:
    text = resources.files("bettercheck").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def word_frequency(
    sentences: Sequence[str],
    stoplist: frozenset[str],
    lexicon: Lexicon,
) -> list[tuple[str, int]]:
    """Ranked (word, count) over sentence tokens, minus stopwords and lexicon phrases.

    Callers are expected to pass only sentences already judged correct and free
    of taxonomy agents; this function removes any residual agent mentions.
    """
    counts: Counter[str] = Counter()
    all_phrases = [p for cls_phrases in lexicon.phrases.values() for p in cls_phrases]
    for sentence in sentences:
        tokens = tokenize(sentence)
        masked = [False] * len(tokens)
        for phrase in all_phrases:
            n = len(phrase)
            for i in range(len(tokens) - n + 1):
                if tuple(tokens[i : i + n]) == phrase:
                    for j in range(i, i + n):
                        masked[j] = True
        counts.update(t for t, m in zip(tokens, masked) if not m and t not in stoplist)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
