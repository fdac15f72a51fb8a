"""Run evaluation (confusion, metrics, correctness, word frequency) and report rendering."""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .annotation import AnnotationHub, AssignmentPlan
from .corpus import AGENT_CLASSES, CorpusManifest
from .metrics import (
    MetricsError,
    cohen_kappa,
    correctness_summary,
    default_stoplist,
    majority_verdict,
    metrics,
)
from .selfcheck import load_captions, scores_from_checks
from .stores import read_jsonl
from .taxonomy import ConfusionMatrix, Lexicon, caption_agents, confusion, default_lexicon

UNPARSEABLE_WARN_RATE = 0.05


def _metric_dict(cm: ConfusionMatrix) -> dict:
    return metrics(cm).as_dict()


def _aggregate(matrices: list[ConfusionMatrix]) -> dict:
    micro = ConfusionMatrix(
        class_name="micro",
        tp=sum(m.tp for m in matrices),
        fp=sum(m.fp for m in matrices),
        fn=sum(m.fn for m in matrices),
        tn=sum(m.tn for m in matrices),
    )
    per_class_reports = [metrics(m).as_dict() for m in matrices]
    macro = {}
    for key in ("precision", "recall", "f1", "accuracy", "specificity", "fpr", "fnr", "mcc"):
        defined = [r[key] for r in per_class_reports if r[key] is not None]
        macro[key] = sum(defined) / len(defined) if defined else None
    return {"micro": _metric_dict(micro), "macro": macro}


def evaluate_run(
    run_dir: Path | str,
    manifest: CorpusManifest,
    lexicon: Lexicon | None = None,
    stoplist: frozenset[str] | None = None,
) -> dict:
    """Compute all run statistics and write evaluation.json."""
    run_dir = Path(run_dir)
    lexicon = lexicon or default_lexicon()
    stoplist = stoplist or default_stoplist()

    captions = load_captions(run_dir)
    sentences_by_id = {s.sentence_id: s for c in captions for s in c.sentences}
    filtered_rows = [rec for _, rec in read_jsonl(run_dir / "filtered.jsonl")]
    scores = scores_from_checks(run_dir)

    # Agent detection over the retained sentences of each filtered (reference) caption.
    truth = {r.image_id: r.agents for r in manifest.records}
    detections: dict[str, frozenset[str]] = {}
    for row in filtered_rows:
        retained_texts = [sentences_by_id[sid].text for sid in row["retained"]]
        detections[row["image_id"]] = caption_agents(retained_texts, lexicon)
    truth_subset = {image_id: truth[image_id] for image_id in detections}

    per_class: dict[str, dict] = {}
    matrices: list[ConfusionMatrix] = []
    for cls in AGENT_CLASSES:
        cm = confusion(detections, truth_subset, cls)
        matrices.append(cm)
        per_class[cls] = {
            "confusion": {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn},
            "metrics": _metric_dict(cm),
        }
    aggregate = _aggregate(matrices)

    # Self-check statistics over every scored sentence of every repeat.
    total_checks = sum(s.total for s in scores.values())
    unparseable = sum(s.unparseable_count for s in scores.values())
    retained_count = sum(len(r["retained"]) for r in filtered_rows)
    excluded_count = sum(len(r["excluded"]) for r in filtered_rows)
    score_histogram: dict[str, int] = {}
    for s in scores.values():
        key = f"{float(s.score):.2f}"
        score_histogram[key] = score_histogram.get(key, 0) + 1
    selfcheck = {
        "scored_sentences": len(scores),
        "check_calls": total_checks,
        "retained": retained_count,
        "excluded": excluded_count,
        "unparseable_verdicts": unparseable,
        "score_histogram": dict(sorted(score_histogram.items())),
    }
    unparseable_rate = unparseable / total_checks if total_checks else 0.0

    # Human-annotation statistics, when an annotation run exists.
    correctness = None
    kappa = None
    annotated_correct_ids: set[str] = set()
    plan_path = run_dir / "plan.json"
    store_path = run_dir / "annotations.jsonl"
    if plan_path.exists() and store_path.exists():
        plan = AssignmentPlan.from_json(json.loads(plan_path.read_text(encoding="utf-8")))
        hub = AnnotationHub(plan, store_path)
        verdicts = hub.sentence_verdicts()
        caption_sentence_ids = [
            [s.sentence_id for s in c.sentences]
            for c in captions
            if c.sentences and all(s.sentence_id in verdicts for s in c.sentences)
        ]
        if caption_sentence_ids:
            covered = {sid for cap in caption_sentence_ids for sid in cap}
            summary = correctness_summary(
                {sid: verdicts[sid] for sid in covered}, caption_sentence_ids
            )
            correctness = {
                "sentence_pct": summary.sentence_pct,
                "caption_pct": summary.caption_pct,
                "annotated_sentences": summary.annotated_sentences,
                "contested_sentences": summary.contested_sentences,
                "annotated_captions": len(caption_sentence_ids),
                "total_captions": len(captions),
            }
            annotated_correct_ids = {
                sid for sid in covered if majority_verdict(verdicts[sid]) == "correct"
            }
        try:
            kappa = hub.agreement()
        except Exception:
            kappa = None

    # Word frequency over correct, agent-free sentences. Without annotations the
    # fallback uses all retained sentences; the flag records which one happened.
    if annotated_correct_ids:
        pool = [sentences_by_id[sid].text for sid in sorted(annotated_correct_ids)]
        annotated_pool = True
    else:
        pool = [sentences_by_id[sid].text for r in filtered_rows for sid in r["retained"]]
        annotated_pool = False
    from .metrics import word_frequency as _word_frequency
    from .taxonomy import extract_agents

    agent_free = [t for t in pool if not extract_agents(t, lexicon)]
    freq = _word_frequency(agent_free, stoplist, lexicon)

    evaluation = {
        "images": len(detections),
        "per_class": per_class,
        "aggregate": aggregate,
        "selfcheck": selfcheck,
        "unparseable_rate": unparseable_rate,
        "correctness": correctness,
        "kappa": kappa,
        "word_frequency": [[w, c] for w, c in freq],
        "word_frequency_from_annotations": annotated_pool,
    }
    (run_dir / "evaluation.json").write_text(
        json.dumps(evaluation, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8"
    )
    return evaluation


def _render_confusion_figure(per_class: dict, out_path: Path) -> None:
    classes = list(per_class)
    fig, axes = plt.subplots(1, len(classes), figsize=(3 * len(classes), 3.2))
    if len(classes) == 1:
        axes = [axes]
    for ax, cls in zip(axes, classes):
        c = per_class[cls]["confusion"]
        grid = [[c["tp"], c["fn"]], [c["fp"], c["tn"]]]
        ax.imshow(grid, cmap="Blues")
        for i in range(2):
            for j in range(2):
                ax.text(j, i, str(grid[i][j]), ha="center", va="center")
        ax.set_title(cls)
        ax.set_xticks([0, 1], ["detected", "not detected"], fontsize=7)
        ax.set_yticks([0, 1], ["present", "absent"], fontsize=7)
    fig.suptitle("Agent confusion vs ground truth (image level)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _render_metrics_figure(per_class: dict, out_path: Path) -> None:
    classes = list(per_class)
    keys = ("precision", "recall", "f1", "mcc")
    fig, ax = plt.subplots(figsize=(1.6 * len(classes) + 2, 3.5))
    width = 0.8 / len(keys)
    for k_idx, key in enumerate(keys):
        xs, ys = [], []
        for c_idx, cls in enumerate(classes):
            value = per_class[cls]["metrics"][key]
            if value is not None:
                xs.append(c_idx + k_idx * width)
                ys.append(value)
        ax.bar(xs, ys, width=width, label=key)
    ax.set_xticks([i + 0.3 for i in range(len(classes))], classes)
    ax.set_ylim(-1.05, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("Per-class metrics (undefined values omitted)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _render_score_figure(selfcheck: dict, out_path: Path) -> None:
    hist = selfcheck.get("score_histogram", {})
    if not hist:
        return
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(range(len(hist)), list(hist.values()))
    ax.set_xticks(range(len(hist)), list(hist.keys()))
    ax.set_xlabel("consistency score")
    ax.set_ylabel("sentences")
    ax.set_title("Consistency score distribution")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def build_report(run_dir: Path | str, run_manifest: dict, render_figures: bool = True) -> dict:
    """Assemble report.json from evaluation.json plus run metadata; render figures."""
    run_dir = Path(run_dir)
    evaluation = json.loads((run_dir / "evaluation.json").read_text(encoding="utf-8"))
    report = {
        "run_id": run_manifest.get("run_id"),
        "model": run_manifest.get("model"),
        "checker_model": run_manifest.get("checker_model"),
        "threshold": run_manifest.get("threshold"),
        "prompt_digests": run_manifest.get("prompt_digests"),
        "temperature": run_manifest.get("temperature"),
        "per_class": evaluation["per_class"],
        "aggregate": evaluation["aggregate"],
        "selfcheck": evaluation["selfcheck"],
        "correctness": evaluation["correctness"],
        "kappa": evaluation["kappa"],
        "word_frequency": evaluation["word_frequency"],
        "unparseable_rate": evaluation["unparseable_rate"],
        "warnings": [],
    }
    if evaluation["unparseable_rate"] > UNPARSEABLE_WARN_RATE:
        report["warnings"].append(
            f"unparseable checker verdict rate {evaluation['unparseable_rate']:.1%} exceeds "
            f"{UNPARSEABLE_WARN_RATE:.0%}: the check prompt and backend may be mismatched"
        )
    (run_dir / "report.json").write_text(
        json.dumps(report, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8"
    )
    if render_figures:
        figures = run_dir / "figures"
        figures.mkdir(exist_ok=True)
        _render_confusion_figure(evaluation["per_class"], figures / "confusion_per_class.png")
        _render_metrics_figure(evaluation["per_class"], figures / "metrics_per_class.png")
        _render_score_figure(evaluation["selfcheck"], figures / "consistency_scores.png")
    return report


def summary_table(report: dict) -> str:
    """Human-readable metric listing, one row per agent class."""
    def fmt(v):
        return "  n/a" if v is None else f"{v:5.3f}"

    lines = [
        f"run {report['run_id']}  model={report['model']}  checker={report['checker_model']}  "
        f"threshold={report['threshold']}",
        f"{'class':<12}{'tp':>5}{'fp':>5}{'fn':>5}{'tn':>5}   prec  recall      f1     mcc",
    ]
    for cls, data in report["per_class"].items():
        c, m = data["confusion"], data["metrics"]
        lines.append(
            f"{cls:<12}{c['tp']:>5}{c['fp']:>5}{c['fn']:>5}{c['tn']:>5}  "
            f"{fmt(m['precision'])} {fmt(m['recall'])} {fmt(m['f1'])} {fmt(m['mcc'])}"
        )
    sc = report["selfcheck"]
    lines.append(
        f"selfcheck: {sc['scored_sentences']} sentences, {sc['check_calls']} checks, "
        f"{sc['retained']} retained / {sc['excluded']} excluded, "
        f"unparseable rate {report['unparseable_rate']:.1%}"
    )
    if report.get("correctness"):
        corr = report["correctness"]
        lines.append(
            f"correctness: sentences {corr['sentence_pct']:.1%}, captions {corr['caption_pct']:.1%} "
            f"({corr['annotated_captions']}/{corr['total_captions']} captions annotated)"
        )
    for warning in report.get("warnings", []):
        lines.append(f"WARNING: {warning}")
    return "\n".join(lines)
