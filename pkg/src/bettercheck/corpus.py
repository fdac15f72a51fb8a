"""Image corpus ingestion: stride sampling, ground-truth labels, and the manifest file."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .stores import StoreError, dumps, read_jsonl, text_digest

AGENT_CLASSES = ("unknown", "vehicle", "pedestrian", "sign", "cyclist")


class CorpusError(Exception):
    """Ingest or manifest-loading failure."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    scenario_id: str
    frame_index: int
    path: str  # relative to the corpus image root
    width_px: int
    height_px: int
    agents: frozenset[str] = field(default_factory=frozenset)


@dataclass
class CorpusManifest:
    corpus_id: str
    created_at: str  # UTC ISO-8601
    stride: int
    per_scenario_cap: int
    records: list[ImageRecord]
    image_root: str | None = None  # record paths are relative to this directory

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}


def _check_agents(agents, context: str) -> frozenset[str]:
    out = frozenset(agents)
    for cls in out:
        if cls not in AGENT_CLASSES:
            raise CorpusError(f"unknown agent class {cls!r} {context}")
    return out


def _load_labels(labels_file: Path) -> dict[str, frozenset[str]]:
    labels: dict[str, frozenset[str]] = {}
    for lineno, rec in read_jsonl(labels_file):
        try:
            image_id = rec["image_id"]
            agents = rec["agents"]
        except KeyError as exc:
            raise StoreError(f"label record missing field {exc}", path=labels_file, line=lineno)
        labels[image_id] = _check_agents(agents, f"for image {image_id!r}")
    return labels


def _discover_frames(image_dir: Path) -> dict[str, list[tuple[int, Path]]]:
    """Map scenario_id -> sorted (frame_index, file) pairs.

    Layout: <image_dir>/<scenario_id>/<frame>.<ext> with the file stem an integer
    frame index.
    """
    scenarios: dict[str, list[tuple[int, Path]]] = {}
    for scenario_dir in sorted(p for p in image_dir.iterdir() if p.is_dir()):
        frames = []
        for f in sorted(scenario_dir.iterdir()):
            if not f.is_file():
                continue
            try:
                idx = int(f.stem)
            except ValueError:
                raise CorpusError(f"file name {f.name!r} in {scenario_dir.name!r} is not an integer frame index")
            frames.append((idx, f))
        frames.sort()
        scenarios[scenario_dir.name] = frames
    return scenarios


def ingest(
    image_dir: Path | str,
    labels_file: Path | str,
    stride: int,
    per_scenario_cap: int,
    created_at: str | None = None,
) -> CorpusManifest:
    """Select every stride-th frame per scenario, capped, with ground-truth agents.

    Images absent from the labels file are a hard error; images listed with no
    agents get an empty set (empty scenes are legitimate).
    """
    image_dir = Path(image_dir)
    labels_file = Path(labels_file)
    if not image_dir.is_dir():
        raise CorpusError(f"image directory not found: {image_dir}")
    if stride < 1:
        raise CorpusError("stride must be >= 1")
    if per_scenario_cap < 1:
        raise CorpusError("per-scenario cap must be >= 1")

    labels = _load_labels(labels_file)
    records: list[ImageRecord] = []
    for scenario_id, frames in sorted(_discover_frames(image_dir).items()):
        selected = [(idx, f) for idx, f in frames if idx % stride == 0][:per_scenario_cap]
        for idx, f in selected:
            image_id = f"{scenario_id}/{f.stem}"
            if image_id not in labels:
                raise CorpusError(f"no label record for selected image {image_id!r}")
            try:
                with Image.open(f) as img:
                    width, height = img.size
            except (UnidentifiedImageError, OSError) as exc:
                raise CorpusError(f"cannot decode image {f}: {exc}") from exc
            records.append(
                ImageRecord(
                    image_id=image_id,
                    scenario_id=scenario_id,
                    frame_index=idx,
                    path=str(f.relative_to(image_dir)),
                    width_px=width,
                    height_px=height,
                    agents=labels[image_id],
                )
            )
    if not records:
        raise CorpusError("no frames selected")

    if created_at is None:
        created_at = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    corpus_id = text_digest("corpus", stride, per_scenario_cap, *(r.image_id for r in records))
    return CorpusManifest(
        corpus_id=corpus_id,
        created_at=created_at,
        stride=stride,
        per_scenario_cap=per_scenario_cap,
        records=records,
        image_root=str(image_dir),
    )


def save_manifest(manifest: CorpusManifest, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        dumps(
            {
                "type": "corpus",
                "corpus_id": manifest.corpus_id,
                "created_at": manifest.created_at,
                "stride": manifest.stride,
                "per_scenario_cap": manifest.per_scenario_cap,
                "image_root": manifest.image_root,
            }
        )
    ]
    for r in manifest.records:
        lines.append(
            dumps(
                {
                    "type": "image",
                    "image_id": r.image_id,
                    "scenario_id": r.scenario_id,
                    "frame_index": r.frame_index,
                    "path": r.path,
                    "width_px": r.width_px,
                    "height_px": r.height_px,
                    "agents": sorted(r.agents),
                }
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: Path | str) -> CorpusManifest:
    path = Path(path)
    manifest: CorpusManifest | None = None
    seen: set[str] = set()
    for lineno, rec in read_jsonl(path):
        kind = rec.get("type")
        if lineno == 1:
            if kind != "corpus":
                raise StoreError("first line must be the corpus header record", path=path, line=lineno)
            try:
                manifest = CorpusManifest(
                    corpus_id=rec["corpus_id"],
                    created_at=rec["created_at"],
                    stride=int(rec["stride"]),
                    per_scenario_cap=int(rec["per_scenario_cap"]),
                    records=[],
                    image_root=rec.get("image_root"),
                )
            except KeyError as exc:
                raise StoreError(f"corpus header missing field {exc}", path=path, line=lineno)
            continue
        if kind != "image":
            raise StoreError(f"unexpected record type {kind!r}", path=path, line=lineno)
        assert manifest is not None
        try:
            record = ImageRecord(
                image_id=rec["image_id"],
                scenario_id=rec["scenario_id"],
                frame_index=int(rec["frame_index"]),
                path=rec["path"],
                width_px=int(rec["width_px"]),
                height_px=int(rec["height_px"]),
                agents=frozenset(rec["agents"]),
            )
        except KeyError as exc:
            raise StoreError(f"image record missing field {exc}", path=path, line=lineno)
        if record.image_id in seen:
            raise StoreError(f"duplicate image_id {record.image_id!r}", path=path, line=lineno)
        seen.add(record.image_id)
        for cls in record.agents:
            if cls not in AGENT_CLASSES:
                raise StoreError(f"unknown agent class {cls!r}", path=path, line=lineno)
        manifest.records.append(record)
    if manifest is None:
        raise StoreError("empty manifest", path=path)
    return manifest


def validate_manifest(manifest: CorpusManifest, image_root: Path | str | None = None) -> list[str]:
    """Return human-readable invariant violations; empty list means valid."""
    violations: list[str] = []
    seen: set[str] = set()
    per_scenario: dict[str, int] = {}
    last_frame: dict[str, int] = {}
    for r in manifest.records:
        if r.image_id in seen:
            violations.append(f"duplicate image_id {r.image_id!r}")
        seen.add(r.image_id)
        per_scenario[r.scenario_id] = per_scenario.get(r.scenario_id, 0) + 1
        if r.scenario_id in last_frame and r.frame_index <= last_frame[r.scenario_id]:
            violations.append(
                f"frame_index not strictly increasing in scenario {r.scenario_id!r} at frame {r.frame_index}"
            )
        last_frame[r.scenario_id] = r.frame_index
        if r.frame_index < 0:
            violations.append(f"negative frame_index on {r.image_id!r}")
        if r.width_px <= 0 or r.height_px <= 0:
            violations.append(f"non-positive image dimensions on {r.image_id!r}")
        for cls in r.agents:
            if cls not in AGENT_CLASSES:
                violations.append(f"unknown agent class {cls!r} on {r.image_id!r}")
        if image_root is not None and not (Path(image_root) / r.path).is_file():
            violations.append(f"missing image file {r.path}")
    for scenario_id, count in per_scenario.items():
        if count > manifest.per_scenario_cap:
            violations.append(
                f"scenario {scenario_id!r} has {count} records, cap is {manifest.per_scenario_cap}"
            )
    ordered = [(r.scenario_id, r.frame_index) for r in manifest.records]
    if ordered != sorted(ordered):
        violations.append("records not sorted by (scenario_id, frame_index)")
    return violations
