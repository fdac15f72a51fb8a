"""Human-annotation workflow: assignment planning, verdict store, and the hub service."""

from __future__ import annotations

import json
import math
import random
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse

from .captioner import Caption
from .corpus import AGENT_CLASSES
from .metrics import RaterPair, cohen_kappa
from .stores import append_jsonl, read_jsonl, text_digest

DEFAULT_OVERLAP_FRACTION = 0.15

KIND_CORRECTNESS = "correctness"
KIND_LABEL_CONSISTENCY = "label_consistency"


class AnnotationError(Exception):
    pass


@dataclass(frozen=True)
class AnnotationTask:
    task_id: str
    kind: str
    image_id: str
    model: str
    repeat_index: int
    ordinal: int  # queue position, shared across annotators
    assigned_to: tuple[str, ...]
    sentence_id: str | None = None
    sentence_text: str | None = None
    caption_text: str | None = None
    ground_truth_agents: tuple[str, ...] | None = None


@dataclass
class AssignmentPlan:
    kind: str
    annotators: list[str]
    overlap_fraction: float
    seed: int
    overlap_captions: list[str]  # caption keys "image_id|model|repeat_index"
    tasks: list[AnnotationTask] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "annotators": self.annotators,
            "overlap_fraction": self.overlap_fraction,
            "seed": self.seed,
            "overlap_captions": self.overlap_captions,
            "tasks": [
                {
                    "task_id": t.task_id,
                    "kind": t.kind,
                    "image_id": t.image_id,
                    "model": t.model,
                    "repeat_index": t.repeat_index,
                    "ordinal": t.ordinal,
                    "assigned_to": list(t.assigned_to),
                    "sentence_id": t.sentence_id,
                    "sentence_text": t.sentence_text,
                    "caption_text": t.caption_text,
                    "ground_truth_agents": list(t.ground_truth_agents)
                    if t.ground_truth_agents is not None
                    else None,
                }
                for t in self.tasks
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "AssignmentPlan":
        plan = cls(
            kind=data["kind"],
            annotators=list(data["annotators"]),
            overlap_fraction=data["overlap_fraction"],
            seed=data["seed"],
            overlap_captions=list(data["overlap_captions"]),
        )
        plan.tasks = [
            AnnotationTask(
                task_id=t["task_id"],
                kind=t["kind"],
                image_id=t["image_id"],
                model=t["model"],
                repeat_index=t["repeat_index"],
                ordinal=t["ordinal"],
                assigned_to=tuple(t["assigned_to"]),
                sentence_id=t.get("sentence_id"),
                sentence_text=t.get("sentence_text"),
                caption_text=t.get("caption_text"),
                ground_truth_agents=tuple(t["ground_truth_agents"])
                if t.get("ground_truth_agents") is not None
                else None,
            )
            for t in data["tasks"]
        ]
        return plan


def _caption_key(c: Caption) -> str:
    return f"{c.image_id}|{c.model}|{c.repeat_index}"


def plan_assignments(
    captions: list[Caption],
    annotators: list[str],
    overlap_fraction: float = DEFAULT_OVERLAP_FRACTION,
    seed: int = 0,
    kind: str = KIND_CORRECTNESS,
    ground_truth: dict[str, frozenset[str]] | None = None,
) -> AssignmentPlan:
    """Partition captions round-robin and double-assign a seeded random overlap.

    The overlap unit is the whole caption: every task derived from an overlap
    caption goes to two annotators.
    """
    if not captions:
        raise AnnotationError("no captions to assign")
    if not annotators:
        raise AnnotationError("no annotators")
    if overlap_fraction > 0 and len(annotators) < 2:
        raise AnnotationError("overlap requires at least two annotators")
    if kind not in (KIND_CORRECTNESS, KIND_LABEL_CONSISTENCY):
        raise AnnotationError(f"unknown task kind {kind!r}")
    if kind == KIND_LABEL_CONSISTENCY and ground_truth is None:
        raise AnnotationError("label-consistency planning needs ground-truth agents")

    ordered = sorted(captions, key=lambda c: (c.image_id, c.model, c.repeat_index))
    n = len(annotators)
    primary = {_caption_key(c): annotators[i % n] for i, c in enumerate(ordered)}

    overlap_count = math.ceil(overlap_fraction * len(ordered))
    rng = random.Random(seed)
    overlap_idx = sorted(rng.sample(range(len(ordered)), overlap_count)) if overlap_count else []
    overlap_keys = [_caption_key(ordered[i]) for i in overlap_idx]
    second = {
        key: annotators[(annotators.index(primary[key]) + 1) % n] for key in overlap_keys
    }

    plan = AssignmentPlan(
        kind=kind,
        annotators=list(annotators),
        overlap_fraction=overlap_fraction,
        seed=seed,
        overlap_captions=overlap_keys,
    )
    ordinal = 0
    for caption in ordered:
        key = _caption_key(caption)
        assigned = (primary[key],) if key not in second else (primary[key], second[key])
        if kind == KIND_CORRECTNESS:
            for sentence in caption.sentences:
                plan.tasks.append(
                    AnnotationTask(
                        task_id=text_digest("task", kind, key, sentence.sentence_id),
                        kind=kind,
                        image_id=caption.image_id,
                        model=caption.model,
                        repeat_index=caption.repeat_index,
                        ordinal=ordinal,
                        assigned_to=assigned,
                        sentence_id=sentence.sentence_id,
                        sentence_text=sentence.text,
                    )
                )
                ordinal += 1
        else:
            agents = ground_truth.get(caption.image_id, frozenset())
            plan.tasks.append(
                AnnotationTask(
                    task_id=text_digest("task", kind, key),
                    kind=kind,
                    image_id=caption.image_id,
                    model=caption.model,
                    repeat_index=caption.repeat_index,
                    ordinal=ordinal,
                    assigned_to=assigned,
                    caption_text=caption.raw_text,
                    ground_truth_agents=tuple(sorted(agents)),
                )
            )
            ordinal += 1
    return plan


def _validate_verdict(kind: str, verdict) -> None:
    if kind == KIND_CORRECTNESS:
        if verdict not in ("correct", "incorrect"):
            raise AnnotationError(f"invalid correctness verdict {verdict!r}")
        return
    if not isinstance(verdict, dict) or not verdict:
        raise AnnotationError("label-consistency verdict must map classes to present/absent")
    for cls, val in verdict.items():
        if cls not in AGENT_CLASSES:
            raise AnnotationError(f"unknown agent class {cls!r} in verdict")
        if val not in ("present", "absent"):
            raise AnnotationError(f"invalid class verdict {val!r}")


def _verdict_key(verdict) -> str:
    # Canonical form so dict verdicts compare reliably for agreement.
    return json.dumps(verdict, sort_keys=True) if isinstance(verdict, dict) else str(verdict)


class AnnotationHub:
    """In-process annotation service state backed by an append-only verdict store."""

    def __init__(self, plan: AssignmentPlan, store_path: Path | str, image_paths: dict[str, Path] | None = None):
        self.plan = plan
        self.store_path = Path(store_path)
        self.image_paths = image_paths or {}
        self.tasks = {t.task_id: t for t in plan.tasks}
        self._lock = threading.Lock()
        # latest verdict per (task_id, annotator_id); history stays on disk
        self.latest: dict[tuple[str, str], object] = {}
        self.history_len: dict[tuple[str, str], int] = {}
        if self.store_path.exists():
            for _, rec in read_jsonl(self.store_path):
                key = (rec["task_id"], rec["annotator_id"])
                self.latest[key] = rec["verdict"]
                self.history_len[key] = self.history_len.get(key, 0) + 1

    def _queue(self, annotator_id: str) -> list[AnnotationTask]:
        if annotator_id not in self.plan.annotators:
            raise AnnotationError(f"unknown annotator {annotator_id!r}")
        return sorted(
            (t for t in self.plan.tasks if annotator_id in t.assigned_to),
            key=lambda t: t.ordinal,
        )

    def progress(self, annotator_id: str) -> tuple[int, int]:
        queue = self._queue(annotator_id)
        done = sum(1 for t in queue if (t.task_id, annotator_id) in self.latest)
        return done, len(queue)

    def next_task(self, annotator_id: str) -> AnnotationTask | None:
        for task in self._queue(annotator_id):
            if (task.task_id, annotator_id) not in self.latest:
                return task
        return None

    def submit(self, task_id: str, annotator_id: str, verdict) -> None:
        task = self.tasks.get(task_id)
        if task is None:
            raise AnnotationError(f"unknown task {task_id!r}")
        if annotator_id not in task.assigned_to:
            raise AnnotationError(f"task {task_id!r} is not assigned to {annotator_id!r}")
        _validate_verdict(task.kind, verdict)
        with self._lock:
            # Durable append first; acknowledge (return) only afterwards.
            append_jsonl(
                self.store_path,
                {
                    "task_id": task_id,
                    "annotator_id": annotator_id,
                    "verdict": verdict,
                    "timestamp": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ"),
                },
            )
            key = (task_id, annotator_id)
            self.latest[key] = verdict
            self.history_len[key] = self.history_len.get(key, 0) + 1

    def agreement(self) -> dict[str, dict]:
        """Pairwise Cohen's kappa over overlap tasks labeled by both raters."""
        pairs: dict[str, dict] = {}
        annotators = self.plan.annotators
        for i in range(len(annotators)):
            for j in range(i + 1, len(annotators)):
                a, b = annotators[i], annotators[j]
                items = {}
                for task in self.plan.tasks:
                    if a in task.assigned_to and b in task.assigned_to:
                        va = self.latest.get((task.task_id, a))
                        vb = self.latest.get((task.task_id, b))
                        if va is not None and vb is not None:
                            items[task.task_id] = (_verdict_key(va), _verdict_key(vb))
                if items:
                    pairs[f"{a}|{b}"] = {
                        "kappa": cohen_kappa(RaterPair(items)),
                        "items": len(items),
                    }
        if not pairs:
            raise AnnotationError("no overlap tasks labeled by both raters yet")
        return pairs

    def sentence_verdicts(self) -> dict[str, list]:
        """sentence_id -> all latest correctness verdicts across annotators."""
        out: dict[str, list] = {}
        for task in self.plan.tasks:
            if task.kind != KIND_CORRECTNESS or task.sentence_id is None:
                continue
            for annotator in task.assigned_to:
                verdict = self.latest.get((task.task_id, annotator))
                if verdict is not None:
                    out.setdefault(task.sentence_id, []).append(verdict)
        return out


def create_app(hub: AnnotationHub) -> FastAPI:
    app = FastAPI(title="bettercheck annotation hub")

    @app.get("/api/tasks/next")
    def next_task(annotator: str):
        try:
            task = hub.next_task(annotator)
        except AnnotationError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if task is None:
            return {"done": True}
        done, total = hub.progress(annotator)
        payload: dict = {
            "task_id": task.task_id,
            "kind": task.kind,
            "image_url": f"/api/images/{task.image_id}",
            "progress": {"done": done, "total": total},
        }
        if task.kind == KIND_CORRECTNESS:
            payload["sentence_text"] = task.sentence_text
        else:
            payload["caption"] = task.caption_text
            payload["ground_truth_agents"] = list(task.ground_truth_agents or ())
        return payload

    @app.post("/api/tasks/{task_id}/label")
    def label(task_id: str, body: dict):
        try:
            hub.submit(task_id, body.get("annotator"), body.get("verdict"))
        except AnnotationError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"ok": True}

    @app.get("/api/images/{image_id:path}")
    def image(image_id: str):
        path = hub.image_paths.get(image_id)
        if path is None or not Path(path).is_file():
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        return FileResponse(path)

    @app.get("/api/agreement")
    def agreement():
        try:
            return hub.agreement()
        except AnnotationError as exc:
            return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.get("/api/progress")
    def progress():
        return {
            annotator: dict(zip(("done", "total"), hub.progress(annotator)))
            for annotator in hub.plan.annotators
        }

    return app
