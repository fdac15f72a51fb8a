"""Line-delimited JSON stores and digest helpers shared by all pipeline stages."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator


class StoreError(Exception):
    """A store file is missing, corrupt, or violates its schema."""

    def __init__(self, message: str, path: Path | str | None = None, line: int | None = None):
        self.path = Path(path) if path is not None else None
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


def dumps(obj: Any) -> str:
    # Deterministic rendering: no whitespace variance, insertion order kept.
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: Path | str, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")
    os.replace(tmp, path)


def append_jsonl(path: Path | str, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(dumps(record))
        fh.write("\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_jsonl(path: Path | str) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, record); line numbers are 1-based."""
    path = Path(path)
    if not path.exists():
        raise StoreError("store file not found", path=path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StoreError(f"invalid JSON: {exc.msg}", path=path, line=lineno) from exc
            if not isinstance(obj, dict):
                raise StoreError("expected a JSON object", path=path, line=lineno)
            yield lineno, obj


def text_digest(*parts: Any) -> str:
    """Stable 16-hex-char digest of an ordered tuple of values."""
    payload = json.dumps([str(p) for p in parts], separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def file_sha256(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
